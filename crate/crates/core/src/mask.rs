use serde::{Deserialize, Serialize};

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    /// `self` lies strictly inside `other` on all four sides.
    pub fn strictly_inside(&self, other: &BBox) -> bool {
        self.x0 > other.x0 && self.x1 < other.x1 && self.y0 > other.y0 && self.y1 < other.y1
    }

    pub fn rows_overlap(&self, other: &BBox) -> bool {
        self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn cols_overlap(&self, other: &BBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1
    }

    /// Chebyshev gap between boxes; 0 when they touch or intersect.
    pub fn gap(&self, other: &BBox) -> usize {
        let dx = if self.x1 < other.x0 {
            other.x0 - self.x1 - 1
        } else if other.x1 < self.x0 {
            self.x0 - other.x1 - 1
        } else {
            0
        };
        let dy = if self.y1 < other.y0 {
            other.y0 - self.y1 - 1
        } else if other.y1 < self.y0 {
            self.y0 - other.y1 - 1
        } else {
            0
        };
        dx.max(dy)
    }
}

/// Binary `height × width` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => BBox { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BBox {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x),
                            y1: b.y1.max(y),
                        },
                    });
                }
            }
        }
        bb
    }

    /// Mean of pixel-centre coordinates `(x + 0.5, y + 0.5)`.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Some pixel of `self` is 4-adjacent to (or coincides with) a pixel of `other`.
    pub fn touches(&self, other: &Mask) -> bool {
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                if other.get(y, x)
                    || (x > 0 && other.get(y, x - 1))
                    || (x + 1 < self.width && other.get(y, x + 1))
                    || (y > 0 && other.get(y - 1, x))
                    || (y + 1 < self.height && other.get(y + 1, x))
                {
                    return true;
                }
            }
        }
        false
    }

    /// Nearest-neighbour resampling sampling each target pixel at its centre.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::empty(height, width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(y, x, self.get(sy.min(self.height - 1), sx.min(self.width - 1)));
            }
        }
        out
    }

    /// Run lengths of alternating false/true values, starting with false.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[usize]) -> Option<Mask> {
        let mut bits = Vec::with_capacity(height * width);
        let mut v = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(v, r));
            v = !v;
        }
        (bits.len() == height * width).then(|| Mask::from_bits(height, width, bits))
    }
}

/// 4-connected components of `mask`, each as its own mask, ordered by first pixel in row-major order.
pub fn connected_components(mask: &Mask) -> Vec<Mask> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Mask::empty(h, w);
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.bits[p] = true;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.bits[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comps.push(comp);
    }
    comps
}
