//! Image container and the differential-geometric front end: Gaussian scale
//! selection, 5×5 second-order Sobel derivatives and the least principal
//! curvature of the intensity Hessian.

mod pnm;

pub use pnm::{load_image, read_pgm, write_pgm};

use crate::error::{Error, Result};

/// Width of the border band where the 5×5 stencil has no full support.
pub const BORDER: usize = 2;

/// Minimum image side accepted by the derivative stencil.
pub const MIN_SIDE: usize = 5;

/// Scale applied to the raw 5×5 second-order Sobel responses so that they
/// estimate true second derivatives: the raw stencils return 64·∂²f for
/// quadratics (16 from the smoothing taps times 4 from each difference).
pub const SOBEL2_NORM: f64 = 1.0 / 64.0;

/// Row-major scalar intensity field.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::Dimension {
                width,
                height,
                reason: format!("data length {} != width*height", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite intensity at index {i}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant image.
    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Build from a per-pixel function `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// 8-bit samples mapped to [0, 1].
    pub fn from_u8(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }

    /// 16-bit samples mapped to [0, 1].
    pub fn from_u16(width: usize, height: usize, pixels: &[u16]) -> Result<Self> {
        Self::new(
            width,
            height,
            pixels.iter().map(|&p| f64::from(p) / 65535.0).collect(),
        )
    }

    /// Quantize to 8 bits, clamping to [0, 1] first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn transposed(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                data[x * h + y] = self.data[y * w + x];
            }
        }
        GrayImage {
            width: h,
            height: w,
            data,
        }
    }

    /// Rotate by 90° counter-clockwise in image coordinates: the pixel at
    /// `(x, y)` moves to `(y, width - 1 - x)`.
    pub fn rotated90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (y, w - 1 - x);
                data[ny * h + nx] = self.data[y * w + x];
            }
        }
        GrayImage {
            width: h,
            height: w,
            data,
        }
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::Dimension {
            width,
            height,
            reason: format!("both sides must be at least {MIN_SIDE}"),
        });
    }
    Ok(())
}

/// Normalized 1D Gaussian taps truncated at `ceil(3·sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian convolution with edge replication.
pub fn gaussian_smooth(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    check_dims(img.width, img.height)?;
    let taps = gaussian_kernel(sigma);
    let radius = taps.len() / 2;
    let (w, h) = (img.width, img.height);

    // Horizontal pass over an edge-padded row buffer.
    let mut tmp = vec![0.0; w * h];
    let mut padded = vec![0.0; w + 2 * radius];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for (i, p) in padded.iter_mut().enumerate() {
            let x = (i as isize - radius as isize).clamp(0, w as isize - 1) as usize;
            *p = row[x];
        }
        let out = &mut tmp[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = taps
                .iter()
                .zip(&padded[x..x + taps.len()])
                .map(|(t, v)| t * v)
                .sum();
        }
    }

    // Vertical pass, accumulating whole rows.
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        let out = &mut data[y * w..(y + 1) * w];
        for (j, t) in taps.iter().enumerate() {
            let sy = (y as isize + j as isize - radius as isize).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            for (o, s) in out.iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

/// Second derivative fields of an image.
#[derive(Debug, Clone)]
pub struct HessianFields {
    pub width: usize,
    pub height: usize,
    pub ixx: Vec<f64>,
    pub ixy: Vec<f64>,
    pub iyy: Vec<f64>,
}

impl HessianFields {
    #[inline]
    pub fn in_interior(&self, x: usize, y: usize) -> bool {
        x >= BORDER && y >= BORDER && x + BORDER < self.width && y + BORDER < self.height
    }
}

/// Smoothing taps of the 5×5 Sobel family.
pub const SOBEL_SMOOTH: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
/// Second-difference taps.
pub const SOBEL_D2: [f64; 5] = [1.0, 0.0, -2.0, 0.0, 1.0];
/// First-derivative taps, in correlation order (positive for increasing ramps).
pub const SOBEL_D1: [f64; 5] = [-1.0, -2.0, 0.0, 2.0, 1.0];

/// 5×5 second-order Sobel derivatives, scaled by [`SOBEL2_NORM`]. The
/// two-pixel border band is left at zero.
pub fn hessian_fields(img: &GrayImage) -> Result<HessianFields> {
    check_dims(img.width, img.height)?;
    let (w, h) = (img.width, img.height);
    let f = &img.data;

    // Horizontal passes: second difference, smoothing and first derivative.
    let mut h_d2 = vec![0.0; w * h];
    let mut h_s = vec![0.0; w * h];
    let mut h_d1 = vec![0.0; w * h];
    for y in 0..h {
        let row = &f[y * w..(y + 1) * w];
        for x in BORDER..w - BORDER {
            let win = &row[x - 2..x + 3];
            let i = y * w + x;
            h_d2[i] = win[0] - 2.0 * win[2] + win[4];
            h_s[i] = win[0] + 4.0 * win[1] + 6.0 * win[2] + 4.0 * win[3] + win[4];
            h_d1[i] = -win[0] - 2.0 * win[1] + 2.0 * win[3] + win[4];
        }
    }

    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let at = |buf: &[f64], dy: usize| buf[(y + dy - 2) * w + x];
            let i = y * w + x;
            ixx[i] = SOBEL2_NORM
                * (at(&h_d2, 0)
                    + 4.0 * at(&h_d2, 1)
                    + 6.0 * at(&h_d2, 2)
                    + 4.0 * at(&h_d2, 3)
                    + at(&h_d2, 4));
            iyy[i] = SOBEL2_NORM * (at(&h_s, 0) - 2.0 * at(&h_s, 2) + at(&h_s, 4));
            ixy[i] = SOBEL2_NORM
                * (-at(&h_d1, 0) - 2.0 * at(&h_d1, 1) + 2.0 * at(&h_d1, 3) + at(&h_d1, 4));
        }
    }
    Ok(HessianFields {
        width: w,
        height: h,
        ixx,
        ixy,
        iyy,
    })
}

/// Threshold on `(Ixx − Iyy)² + 4·Ixy²` below which the Hessian is treated
/// as isotropic.
pub const DEGENERACY_EPS: f64 = 1e-12;

pub const FLAG_VALID: u8 = 1;
pub const FLAG_DEGENERATE: u8 = 2;

/// Smaller Hessian eigenvalue and its unit eigenvector, per pixel.
#[derive(Debug, Clone)]
pub struct CurvatureField {
    pub width: usize,
    pub height: usize,
    pub kappa: Vec<f64>,
    pub dir_x: Vec<f64>,
    pub dir_y: Vec<f64>,
    pub flags: Vec<u8>,
}

impl CurvatureField {
    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.flags[i] & FLAG_VALID != 0
    }

    #[inline]
    pub fn is_degenerate(&self, i: usize) -> bool {
        self.flags[i] & FLAG_DEGENERATE != 0
    }
}

/// Least eigenvalue and unit eigenvector of `[[a, b], [b, c]]`. Returns
/// `None` for the direction when the matrix is (numerically) isotropic.
#[inline]
pub fn least_eigen(a: f64, b: f64, c: f64) -> (f64, Option<(f64, f64)>) {
    let diff = a - c;
    let disc = diff * diff + 4.0 * b * b;
    let kappa = 0.5 * ((a + c) - disc.sqrt());
    if disc < DEGENERACY_EPS {
        return (kappa, None);
    }
    // Both (kappa - c, b) and (b, kappa - a) solve (H - kappa I) v = 0; take
    // the better conditioned one.
    let (u1, u2) = (kappa - c, b);
    let (v1, v2) = (b, kappa - a);
    let (n_u, n_v) = (u1 * u1 + u2 * u2, v1 * v1 + v2 * v2);
    let (ex, ey, n) = if n_u >= n_v { (u1, u2, n_u) } else { (v1, v2, n_v) };
    let n = n.sqrt();
    (kappa, Some((ex / n, ey / n)))
}

/// Per-pixel least principal curvature. Border and isotropic pixels are
/// flagged; isotropic ones get the default direction (1, 0).
pub fn least_curvature(hess: &HessianFields) -> CurvatureField {
    let (w, h) = (hess.width, hess.height);
    let n = w * h;
    let mut field = CurvatureField {
        width: w,
        height: h,
        kappa: vec![0.0; n],
        dir_x: vec![1.0; n],
        dir_y: vec![0.0; n],
        flags: vec![0; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (kappa, dir) = least_eigen(hess.ixx[i], hess.ixy[i], hess.iyy[i]);
            field.kappa[i] = kappa;
            let mut flags = if hess.in_interior(x, y) { FLAG_VALID } else { 0 };
            match dir {
                Some((dx, dy)) => {
                    field.dir_x[i] = dx;
                    field.dir_y[i] = dy;
                }
                None => flags |= FLAG_DEGENERATE,
            }
            field.flags[i] = flags;
        }
    }
    field
}
