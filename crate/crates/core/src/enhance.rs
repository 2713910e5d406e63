//! Fixed-weight center-surround kernels and the enhancement channel stack.
//!
//! Each kernel splits an `s×s` neighborhood into a centered rectangle of
//! "red" cells and the remaining "blue" surround. Its response at a pixel is
//! `mean(red) − mean(blue)` over the replicate-padded neighborhood, which
//! cancels any locally uniform background exactly and peaks on compact
//! bright regions. The default bank covers five sizes and three aspect
//! ratios (square, horizontal bar, vertical bar), 15 kernels total; their
//! responses are stacked with the raw image into the 16-channel input of the
//! segmentation network. The weights never train — that is the point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgio::{replicate_pad, Image};
use crate::nn::Tensor;

/// Shape of the red (center) rectangle relative to the kernel square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aspect {
    /// `m×m` centered square.
    Square,
    /// `1×m` centered row.
    Horizontal,
    /// `m×1` centered column.
    Vertical,
}

impl Aspect {
    /// Deterministic ordering tag within one kernel size.
    fn order(self) -> u8 {
        match self {
            Aspect::Square => 0,
            Aspect::Horizontal => 1,
            Aspect::Vertical => 2,
        }
    }
}

/// One center-surround kernel: cell offsets are `(row, col)` relative to the
/// kernel center, each in `[−(size−1)/2, (size−1)/2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    size: usize,
    aspect: Aspect,
    red_cells: Vec<(i32, i32)>,
    blue_cells: Vec<(i32, i32)>,
}

impl KernelSpec {
    /// Validate and build a kernel. Red and blue must be disjoint, jointly
    /// cover the full `size×size` grid, both be non-empty, and red must form
    /// a rectangle centered on the origin. Cell lists are stored sorted so
    /// summation order — and therefore floating-point output — is fixed.
    pub fn new(
        size: usize,
        aspect: Aspect,
        mut red_cells: Vec<(i32, i32)>,
        mut blue_cells: Vec<(i32, i32)>,
    ) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel size {size} must be odd and >= 3"
            )));
        }
        red_cells.sort_unstable();
        blue_cells.sort_unstable();
        if red_cells.is_empty() || blue_cells.is_empty() {
            return Err(Error::InvalidConfig(
                "kernel needs at least one red and one blue cell".into(),
            ));
        }
        let half = (size as i32 - 1) / 2;
        let mut all: Vec<(i32, i32)> = red_cells.iter().chain(&blue_cells).copied().collect();
        all.sort_unstable();
        let mut expected = Vec::with_capacity(size * size);
        for r in -half..=half {
            for c in -half..=half {
                expected.push((r, c));
            }
        }
        if all != expected {
            return Err(Error::InvalidConfig(format!(
                "red/blue cells must partition the {size}x{size} grid exactly"
            )));
        }
        let (min_r, max_r) = (red_cells.iter().map(|c| c.0).min().unwrap(), red_cells.iter().map(|c| c.0).max().unwrap());
        let (min_c, max_c) = (red_cells.iter().map(|c| c.1).min().unwrap(), red_cells.iter().map(|c| c.1).max().unwrap());
        let rect_len = ((max_r - min_r + 1) * (max_c - min_c + 1)) as usize;
        if rect_len != red_cells.len() || min_r != -max_r || min_c != -max_c {
            return Err(Error::InvalidConfig(
                "red cells must form a rectangle centered on the origin".into(),
            ));
        }
        Ok(KernelSpec {
            size,
            aspect,
            red_cells,
            blue_cells,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn aspect(&self) -> Aspect {
        self.aspect
    }

    pub fn red_cells(&self) -> &[(i32, i32)] {
        &self.red_cells
    }

    pub fn blue_cells(&self) -> &[(i32, i32)] {
        &self.blue_cells
    }

    /// Number of red cells, `n_r`.
    pub fn n_red(&self) -> usize {
        self.red_cells.len()
    }

    /// Number of blue cells, `n_b`.
    pub fn n_blue(&self) -> usize {
        self.blue_cells.len()
    }

    /// The kernel as an explicit `size×size` weight grid:
    /// `1/n_r` on red cells, `−1/n_b` on blue cells. The fixed head of the
    /// network consumes this form.
    pub fn weight_grid(&self) -> Vec<f64> {
        let half = (self.size as i32 - 1) / 2;
        let mut grid = vec![0.0; self.size * self.size];
        let idx = |r: i32, c: i32| ((r + half) as usize) * self.size + (c + half) as usize;
        let wr = 1.0 / self.n_red() as f64;
        let wb = -1.0 / self.n_blue() as f64;
        for &(r, c) in &self.red_cells {
            grid[idx(r, c)] = wr;
        }
        for &(r, c) in &self.blue_cells {
            grid[idx(r, c)] = wb;
        }
        grid
    }
}

/// Ordered collection of kernels; the default bank is ordered by size, then
/// square / horizontal / vertical within each size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelBank {
    kernels: Vec<KernelSpec>,
}

impl KernelBank {
    pub fn new(mut kernels: Vec<KernelSpec>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidConfig("kernel bank must not be empty".into()));
        }
        kernels.sort_by_key(|k| (k.size, k.aspect.order()));
        Ok(KernelBank { kernels })
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// Largest kernel size in the bank.
    pub fn max_size(&self) -> usize {
        self.kernels.iter().map(|k| k.size).max().unwrap_or(0)
    }
}

/// Center extent `m` for each kernel size: chosen so the red rectangle stays
/// comfortably smaller than the surround while tracking the 1–5 pixel
/// targets the sizes are meant to match.
fn center_extent(size: usize) -> usize {
    match size {
        3 => 1,
        5 | 7 => 3,
        9 | 11 => 5,
        _ => unreachable!("default bank sizes are fixed"),
    }
}

/// The standard 15-kernel bank: sizes {3,5,7,9,11} × aspects
/// {square, horizontal, vertical}.
pub fn build_default_bank() -> KernelBank {
    let mut kernels = Vec::with_capacity(15);
    for &size in &[3usize, 5, 7, 9, 11] {
        let m = center_extent(size) as i32;
        let rh = (m - 1) / 2;
        for aspect in [Aspect::Square, Aspect::Horizontal, Aspect::Vertical] {
            let (row_range, col_range) = match aspect {
                Aspect::Square => (-rh..=rh, -rh..=rh),
                Aspect::Horizontal => (0..=0, -rh..=rh),
                Aspect::Vertical => (-rh..=rh, 0..=0),
            };
            let mut red = Vec::new();
            for r in row_range.clone() {
                for c in col_range.clone() {
                    red.push((r, c));
                }
            }
            let half = (size as i32 - 1) / 2;
            let mut blue = Vec::new();
            for r in -half..=half {
                for c in -half..=half {
                    if !red.contains(&(r, c)) {
                        blue.push((r, c));
                    }
                }
            }
            kernels.push(
                KernelSpec::new(size, aspect, red, blue)
                    .expect("default bank layouts satisfy all invariants"),
            );
        }
    }
    KernelBank::new(kernels).expect("default bank is non-empty")
}

/// Response image of one kernel: at every pixel, the mean over red cells
/// minus the mean over blue cells of the replicate-padded neighborhood.
/// Output has the same dimensions as the input.
pub fn kernel_response(image: &Image, spec: &KernelSpec) -> Result<Image> {
    if image.width() < spec.size || image.height() < spec.size {
        return Err(Error::ImageSmallerThanKernel {
            width: image.width(),
            height: image.height(),
            kernel: spec.size,
        });
    }
    let half = (spec.size - 1) / 2;
    let padded = replicate_pad(image, half, half, half, half);
    let (w, h) = (image.width(), image.height());
    let inv_r = 1.0 / spec.n_red() as f64;
    let inv_b = 1.0 / spec.n_blue() as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            // (x, y) in the original maps to (x + half, y + half) in the
            // padded image, so offsets index without bounds checks.
            let mut red_sum = 0.0;
            for &(r, c) in &spec.red_cells {
                red_sum += padded.get(
                    (x as i32 + half as i32 + c) as usize,
                    (y as i32 + half as i32 + r) as usize,
                );
            }
            let mut blue_sum = 0.0;
            for &(r, c) in &spec.blue_cells {
                blue_sum += padded.get(
                    (x as i32 + half as i32 + c) as usize,
                    (y as i32 + half as i32 + r) as usize,
                );
            }
            out[y * w + x] = red_sum * inv_r - blue_sum * inv_b;
        }
    }
    Image::new(w, h, out)
}

/// Stack the raw image with every kernel response into a
/// `(1, 1+|bank|, H, W)` tensor: channel 0 is the input unchanged, channel
/// `k ≥ 1` is the response of bank kernel `k−1` in bank order.
pub fn enhance_stack(image: &Image, bank: &KernelBank) -> Result<Tensor> {
    let (w, h) = (image.width(), image.height());
    let mut data = Vec::with_capacity((1 + bank.len()) * w * h);
    data.extend_from_slice(image.data());
    for spec in bank.kernels() {
        data.extend_from_slice(kernel_response(image, spec)?.data());
    }
    Tensor::new([1, 1 + bank.len(), h, w], data)
}
