//! Quasi illumination-invariant image filters, feathered masks and gamma correction.
//!
//! Images are `H × W` matrices (row = y). All convolutions use separable
//! kernels truncated at 4σ with half-sample symmetric (reflected) borders.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HP_SIGMA: f64 = 1.5;
pub const QI_GUARD: f64 = 1e-3;
pub const BANDPASS_W1: f64 = 2.3;
pub const BANDPASS_W2: f64 = 6.2;
pub const LG_SIGMA: f64 = 3.0;
pub const DERIV_SIGMA: f64 = 6.0;
pub const ED_PERCENTILE: f64 = 90.0;
pub const FEATHER_DECAY: f64 = 8.0;
pub const GAMMA_MIN: f64 = 0.1;
pub const GAMMA_MAX: f64 = 7.9;
pub const GAMMA_TOL: f64 = 1e-4;
pub const GAMMA_MAP_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FilterTag {
    Raw,
    Hp,
    Qi,
    Ed,
    Lg,
    Dx,
    Dy,
    Bandpass,
}

impl FilterTag {
    pub fn parse(s: &str) -> Result<FilterTag> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "raw" => FilterTag::Raw,
            "hp" => FilterTag::Hp,
            "qi" => FilterTag::Qi,
            "ed" => FilterTag::Ed,
            "lg" => FilterTag::Lg,
            "dx" => FilterTag::Dx,
            "dy" => FilterTag::Dy,
            "bandpass" => FilterTag::Bandpass,
            other => return Err(Error::InvalidParams(format!("unknown filter '{other}'"))),
        })
    }

    fn allowed_params(self) -> &'static [&'static str] {
        match self {
            FilterTag::Raw => &[],
            FilterTag::Hp | FilterTag::Lg | FilterTag::Dx | FilterTag::Dy => &["sigma"],
            FilterTag::Qi => &["sigma", "guard"],
            FilterTag::Ed => &["percentile"],
            FilterTag::Bandpass => &["w1", "w2"],
        }
    }
}

/// A filter and its parameters. Missing parameters take the documented defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterKind {
    pub kind: FilterTag,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl FilterKind {
    pub fn new(kind: FilterTag) -> Self {
        FilterKind { kind, params: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn bandpass(w1: f64, w2: f64) -> Self {
        FilterKind::new(FilterTag::Bandpass).with("w1", w1).with("w2", w2)
    }

    fn param(&self, name: &str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    pub fn sigma(&self) -> f64 {
        let d = match self.kind {
            FilterTag::Lg => LG_SIGMA,
            FilterTag::Dx | FilterTag::Dy => DERIV_SIGMA,
            _ => HP_SIGMA,
        };
        self.param("sigma", d)
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.kind.allowed_params();
        for (k, v) in &self.params {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::InvalidParams(format!("{:?} takes no parameter '{k}'", self.kind)));
            }
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::InvalidParams(format!("parameter '{k}' must be positive, got {v}")));
            }
        }
        match self.kind {
            FilterTag::Bandpass => {
                let (w1, w2) = (self.param("w1", BANDPASS_W1), self.param("w2", BANDPASS_W2));
                if w1 >= w2 {
                    return Err(Error::InvalidParams(format!("band-pass needs w1 < w2, got {w1} >= {w2}")));
                }
            }
            FilterTag::Ed => {
                if self.param("percentile", ED_PERCENTILE) > 100.0 {
                    return Err(Error::InvalidParams("percentile must be at most 100".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Symmetric kernel samples `k = -r..=r`, stored at index `k + r`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// First-derivative-of-Gaussian kernel, scaled so a unit ramp responds with exactly 1.
fn gaussian_deriv_kernel(sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(sigma);
    let r = (g.len() / 2) as isize;
    let m2: f64 = (-r..=r).zip(&g).map(|(k, w)| (k * k) as f64 * w).sum();
    (-r..=r).zip(&g).map(|(k, w)| -(k as f64) * w / m2).collect()
}

/// Second-derivative-of-Gaussian kernel: zero sum, and responds with exactly 2 to `x²`.
fn gaussian_second_kernel(sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(sigma);
    let r = (g.len() / 2) as isize;
    let ks: Vec<f64> = (-r..=r).map(|k| (k * k) as f64).collect();
    // h = a k² g − b g with Σh = 0 and Σ k² h = 2
    let m2: f64 = ks.iter().zip(&g).map(|(k2, w)| k2 * w).sum();
    let m4: f64 = ks.iter().zip(&g).map(|(k2, w)| k2 * k2 * w).sum();
    let a = 2.0 / (m4 - m2 * m2);
    let b = a * m2;
    ks.iter().zip(&g).map(|(k2, w)| a * k2 * w - b * w).collect()
}

/// `out(y, x) = Σ_k img(y, x − k) h(k)` along rows (horizontal) or columns.
fn convolve_1d(img: &DMatrix<f64>, kernel: &[f64], horizontal: bool) -> DMatrix<f64> {
    let (h, w) = img.shape();
    let r = (kernel.len() / 2) as isize;
    let mut out = DMatrix::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let k = i as isize - r;
                acc += kv
                    * if horizontal {
                        img[(y, reflect(x as isize - k, w))]
                    } else {
                        img[(reflect(y as isize - k, h), x)]
                    };
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn separable(img: &DMatrix<f64>, kx: &[f64], ky: &[f64]) -> DMatrix<f64> {
    convolve_1d(&convolve_1d(img, kx, true), ky, false)
}

pub fn gaussian_blur(img: &DMatrix<f64>, sigma: f64) -> DMatrix<f64> {
    let k = gaussian_kernel(sigma);
    separable(img, &k, &k)
}

pub fn flip_horizontal(img: &DMatrix<f64>) -> DMatrix<f64> {
    let w = img.ncols();
    DMatrix::from_fn(img.nrows(), w, |r, c| img[(r, w - 1 - c)])
}

pub fn apply_filter(kind: &FilterKind, img: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    kind.validate()?;
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("image has non-finite pixels".into()));
    }
    Ok(match kind.kind {
        FilterTag::Raw => img.clone(),
        FilterTag::Hp => img - gaussian_blur(img, kind.sigma()),
        FilterTag::Qi => {
            let low = gaussian_blur(img, kind.sigma());
            let guard = kind.param("guard", QI_GUARD);
            DMatrix::from_fn(img.nrows(), img.ncols(), |r, c| {
                let l = low[(r, c)];
                let den = if l.abs() < guard { guard.copysign(if l == 0.0 { 1.0 } else { l }) } else { l };
                (img[(r, c)] - l) / den
            })
        }
        FilterTag::Bandpass => {
            let (w1, w2) = (kind.param("w1", BANDPASS_W1), kind.param("w2", BANDPASS_W2));
            gaussian_blur(img, w1) - gaussian_blur(img, w2)
        }
        FilterTag::Lg => {
            let g = gaussian_kernel(kind.sigma());
            let g2 = gaussian_second_kernel(kind.sigma());
            separable(img, &g2, &g) + separable(img, &g, &g2)
        }
        FilterTag::Dx => {
            let s = kind.sigma();
            separable(img, &gaussian_deriv_kernel(s), &gaussian_kernel(s))
        }
        FilterTag::Dy => {
            let s = kind.sigma();
            separable(img, &gaussian_kernel(s), &gaussian_deriv_kernel(s))
        }
        FilterTag::Ed => edge_distance(img, kind.param("percentile", ED_PERCENTILE)),
    })
}

/// Sobel gradient magnitude with reflected borders.
pub fn sobel_magnitude(img: &DMatrix<f64>) -> DMatrix<f64> {
    let (h, w) = img.shape();
    let at = |y: isize, x: isize| img[(reflect(y, h), reflect(x, w))];
    DMatrix::from_fn(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Value returned everywhere by the ED filter when an image has no edges:
/// the image diagonal, an upper bound on any in-image distance.
pub fn ed_blank_sentinel(h: usize, w: usize) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

/// Distance transform of the edge map (Sobel magnitude at or above the given percentile, and non-zero).
pub fn edge_distance(img: &DMatrix<f64>, percentile: f64) -> DMatrix<f64> {
    let mag = sobel_magnitude(img);
    let mut sorted: Vec<f64> = mag.iter().cloned().collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize - 1;
    let thr = sorted[rank.min(sorted.len() - 1)];
    let edges = mag.map(|m| m > 0.0 && m >= thr);
    if !edges.iter().any(|&e| e) {
        let s = ed_blank_sentinel(img.nrows(), img.ncols());
        return DMatrix::from_element(img.nrows(), img.ncols(), s);
    }
    distance_transform(&edges)
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel
/// (lower-envelope-of-parabolas algorithm, one pass per axis).
pub fn distance_transform(mask: &DMatrix<bool>) -> DMatrix<f64> {
    const INF: f64 = 1e20;
    let (h, w) = mask.shape();
    let mut f = mask.map(|m| if m { 0.0 } else { INF });
    let mut buf = Vec::new();
    for x in 0..w {
        buf.clear();
        buf.extend((0..h).map(|y| f[(y, x)]));
        let d = dt_1d(&buf);
        for y in 0..h {
            f[(y, x)] = d[y];
        }
    }
    for y in 0..h {
        buf.clear();
        buf.extend((0..w).map(|x| f[(y, x)]));
        let d = dt_1d(&buf);
        for x in 0..w {
            f[(y, x)] = d[x];
        }
    }
    f.map(|v| v.sqrt())
}

fn dt_1d(f: &[f64]) -> Vec<f64> {
    // only finite parabolas take part; an all-infinite line stays infinite
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i] < 1e19).collect();
    if sites.is_empty() {
        return f.to_vec();
    }
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        let mut s;
        loop {
            let p = *v.last().unwrap();
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
                if v.is_empty() {
                    break;
                }
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.clear();
            z.push(f64::NEG_INFINITY);
            z.push(f64::INFINITY);
        } else {
            let last = z.len() - 1;
            z[last] = s;
            v.push(q);
            z.push(f64::INFINITY);
        }
    }
    let mut k = 0usize;
    (0..f.len())
        .map(|q| {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            let dx = q as f64 - p as f64;
            dx * dx + f[p]
        })
        .collect()
}

/// Soft mask `M ∗ exp(−r²/decay)` with a unit-sum kernel, clamped to `[0, 1]`.
pub fn feather_mask(mask: &DMatrix<f64>, decay: f64) -> Result<DMatrix<f64>> {
    if !(decay > 0.0) {
        return Err(Error::InvalidParams(format!("decay must be positive, got {decay}")));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidParams("mask must be binary".into()));
    }
    // exp(−r²/decay) is a Gaussian with σ² = decay / 2
    Ok(gaussian_blur(mask, (decay / 2.0).sqrt()).map(|v| v.clamp(0.0, 1.0)))
}

fn check_positive(img: &DMatrix<f64>) -> Result<()> {
    if img.iter().any(|&v| !(v > 0.0)) {
        Err(Error::NonPositivePixels)
    } else {
        Ok(())
    }
}

/// Sum of squared differences `Σ (I^γ − C)²` over the given pixel pairs.
fn gamma_objective(pix: &[(f64, f64)], g: f64) -> f64 {
    pix.iter().map(|&(li, c)| ((g * li).exp() - c).powi(2)).sum()
}

/// Brent's minimiser (golden section with parabolic steps) on `[a, b]`.
pub fn brent_minimize(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a, b);
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if !(p.abs() >= (0.5 * q * etemp).abs() || p <= q * (a - x) || p >= q * (b - x)) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    x
}

/// Optimal exponent for a set of `(ln I, C)` pairs: Brent search on the bracket,
/// then Newton steps on the smooth objective while they keep improving it.
fn solve_gamma(pix: &[(f64, f64)]) -> f64 {
    let mut g = brent_minimize(|g| gamma_objective(pix, g), GAMMA_MIN, GAMMA_MAX, GAMMA_TOL);
    let mut fg = gamma_objective(pix, g);
    for _ in 0..30 {
        let (mut d1, mut d2) = (0.0, 0.0);
        for &(li, c) in pix {
            let p = (g * li).exp();
            let pl = p * li;
            d1 += 2.0 * (p - c) * pl;
            d2 += 2.0 * (pl * pl + (p - c) * pl * li);
        }
        if !(d2 > 0.0) || d1 == 0.0 {
            break;
        }
        let cand = (g - d1 / d2).clamp(GAMMA_MIN, GAMMA_MAX);
        let fc = gamma_objective(pix, cand);
        if fc > fg || cand == g {
            break;
        }
        g = cand;
        fg = fc;
    }
    g
}

/// Gamma intensity correction of `image` towards `canonical`.
pub fn gamma_correct(image: &DMatrix<f64>, canonical: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if image.shape() != canonical.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", canonical.shape()),
            got: format!("{:?}", image.shape()),
        });
    }
    check_positive(image)?;
    let pix: Vec<(f64, f64)> = image.iter().zip(canonical.iter()).map(|(i, c)| (i.ln(), *c)).collect();
    let g = solve_gamma(&pix);
    Ok((image.map(|v| v.powf(g)), g))
}

/// Per-pixel exponents, one value per region before blurring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaMap {
    pub values: DMatrix<f64>,
}

/// Region-wise gamma correction with a blurred exponent map.
/// Region ids must form `0..R`; every id in that range needs at least one pixel.
pub fn region_gamma_correct(
    image: &DMatrix<f64>,
    canonical: &DMatrix<f64>,
    regions: &DMatrix<usize>,
    blur_sigma: f64,
) -> Result<(DMatrix<f64>, GammaMap)> {
    if image.shape() != canonical.shape() || image.shape() != regions.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", image.shape()),
            got: format!("{:?} / {:?}", canonical.shape(), regions.shape()),
        });
    }
    check_positive(image)?;
    let n_regions = regions.iter().max().map_or(0, |m| m + 1);
    let mut gammas = Vec::with_capacity(n_regions);
    for id in 0..n_regions {
        let pix: Vec<(f64, f64)> = image
            .iter()
            .zip(canonical.iter())
            .zip(regions.iter())
            .filter(|(_, &r)| r == id)
            .map(|((i, c), _)| (i.ln(), *c))
            .collect();
        if pix.is_empty() {
            return Err(Error::EmptyRegion(id));
        }
        gammas.push(solve_gamma(&pix));
    }
    let raw = regions.map(|r| gammas[r]);
    let smooth = if blur_sigma > 0.0 { gaussian_blur(&raw, blur_sigma) } else { raw };
    let out = image.zip_map(&smooth, |i, g| i.powf(g));
    Ok((out, GammaMap { values: smooth }))
}
