//! SSI, LNCC and PSNR on images scaled to `[0, data_range]`, plus per-set reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::data::{preprocess, PairManifest};
use crate::error::{Error, Result};
use crate::networks::Enhancer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub ssi_window: usize,
    pub ssi_sigma: f64,
    pub ssi_k1: f64,
    pub ssi_k2: f64,
    pub lncc_window: usize,
    pub lncc_eps: f64,
    pub data_range: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ssi_window: 11,
            ssi_sigma: 1.5,
            ssi_k1: 0.01,
            ssi_k2: 0.03,
            lncc_window: 9,
            lncc_eps: 1e-5,
            data_range: 1.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ssi_window", self.ssi_window), ("lncc_window", self.lncc_window)] {
            if w == 0 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and positive, got {w}")));
            }
        }
        let positive = [
            ("ssi_sigma", self.ssi_sigma),
            ("ssi_k1", self.ssi_k1),
            ("ssi_k2", self.ssi_k2),
            ("lncc_eps", self.lncc_eps),
            ("data_range", self.data_range),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A borrowed single-channel image in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct Plane<'a> {
    pub data: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl<'a> Plane<'a> {
    pub fn new(data: &'a [f64], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { data, height, width })
    }
}

fn check_pair(x: &Plane, y: &Plane) -> Result<()> {
    if (x.height, x.width) != (y.height, y.width) {
        return Err(Error::Shape(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(())
}

fn check_window(x: &Plane, window: usize, what: &str) -> Result<()> {
    if x.height < window || x.width < window {
        return Err(Error::Shape(format!(
            "{what} needs at least {window}x{window} pixels, image is {}x{}",
            x.height, x.width
        )));
    }
    Ok(())
}

/// Maps generator range `[-1, 1]` to `[0, 1]`.
pub fn to_unit_range(plane: &[f64]) -> Vec<f64> {
    plane.iter().map(|v| (v + 1.0) * 0.5).collect()
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr(x: &Plane, y: &Plane, data_range: f64) -> Result<f64> {
    check_pair(x, y)?;
    let mse = x
        .data
        .iter()
        .zip(y.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering with a symmetric kernel.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&src[c..c + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &rows[(r + i) * ow..(r + i + 1) * ow];
            for (o, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Structural similarity map per window position (valid positions only).
pub fn ssi_map(x: &Plane, y: &Plane, cfg: &MetricConfig) -> Result<Vec<f64>> {
    check_pair(x, y)?;
    check_window(x, cfg.ssi_window, "SSI")?;
    let (h, w) = (x.height, x.width);
    let k = gaussian_kernel(cfg.ssi_window, cfg.ssi_sigma);
    let c1 = (cfg.ssi_k1 * cfg.data_range).powi(2);
    let c2 = (cfg.ssi_k2 * cfg.data_range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        x.data.iter().zip(y.data).map(|(a, b)| f(*a, *b)).collect()
    };
    let mx = filter_valid(x.data, h, w, &k);
    let my = filter_valid(y.data, h, w, &k);
    let mxx = filter_valid(&prod(&|a, _| a * a), h, w, &k);
    let myy = filter_valid(&prod(&|_, b| b * b), h, w, &k);
    let mxy = filter_valid(&prod(&|a, b| a * b), h, w, &k);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect())
}

/// Mean structural similarity with a Gaussian window.
pub fn ssi(x: &Plane, y: &Plane, cfg: &MetricConfig) -> Result<f64> {
    let map = ssi_map(x, y, cfg)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Summed-area table with a zero first row and column.
fn integral(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut t = vec![0.0; (h + 1) * stride];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += data[r * w + c];
            t[(r + 1) * stride + c + 1] = t[r * stride + c + 1] + row;
        }
    }
    t
}

fn box_sums(data: &[f64], h: usize, w: usize, n: usize) -> Vec<f64> {
    let t = integral(data, h, w);
    let stride = w + 1;
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            out.push(
                t[(r + n) * stride + c + n] - t[r * stride + c + n] - t[(r + n) * stride + c]
                    + t[r * stride + c],
            );
        }
    }
    out
}

/// Mean windowed Pearson correlation with `lncc_eps` added to each variance.
pub fn lncc(x: &Plane, y: &Plane, cfg: &MetricConfig) -> Result<f64> {
    check_pair(x, y)?;
    check_window(x, cfg.lncc_window, "LNCC")?;
    let (h, w, n) = (x.height, x.width, cfg.lncc_window);
    // Centering on the image means keeps the summed-area tables well conditioned.
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let (ax, ay) = (mean(x.data), mean(y.data));
    let xc: Vec<f64> = x.data.iter().map(|v| v - ax).collect();
    let yc: Vec<f64> = y.data.iter().map(|v| v - ay).collect();
    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let area = (n * n) as f64;
    let sx = box_sums(&xc, h, w, n);
    let sy = box_sums(&yc, h, w, n);
    let sxx = box_sums(&sq(&xc, &xc), h, w, n);
    let syy = box_sums(&sq(&yc, &yc), h, w, n);
    let sxy = box_sums(&sq(&xc, &yc), h, w, n);
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / area, sy[i] / area);
            let vx = (sxx[i] / area - mx * mx).max(0.0);
            let vy = (syy[i] / area - my * my).max(0.0);
            let cov = sxy[i] / area - mx * my;
            cov / ((vx + cfg.lncc_eps) * (vy + cfg.lncc_eps)).sqrt()
        })
        .sum();
    Ok((total / sx.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub pair_id: String,
    pub ssi: f64,
    pub lncc: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub ssi: f64,
    pub lncc: f64,
    /// Mean over finite values; `None` when every image scored `+inf`.
    pub psnr: Option<f64>,
    pub psnr_excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub aggregate: Aggregate,
    pub n: usize,
    pub config: MetricConfig,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    /// Aggregates in the given order; infinite PSNR values are excluded from the mean.
    pub fn from_scores(per_image: Vec<ImageScore>, config: MetricConfig) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("metric report needs at least one image".into()));
        }
        let n = per_image.len();
        let ssi = per_image.iter().map(|s| s.ssi).sum::<f64>() / n as f64;
        let lncc = per_image.iter().map(|s| s.lncc).sum::<f64>() / n as f64;
        let finite: Vec<f64> = per_image.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        Ok(Self {
            aggregate: Aggregate {
                ssi,
                lncc,
                psnr,
                psnr_excluded: n - finite.len(),
            },
            per_image,
            n,
            config,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Data(format!("writing report: {e}"));
        w.write_record(["pair_id", "ssi", "lncc", "psnr"]).map_err(csv_err)?;
        for s in &self.per_image {
            w.write_record([s.pair_id.clone(), fmt_value(s.ssi), fmt_value(s.lncc), fmt_value(s.psnr)])
                .map_err(csv_err)?;
        }
        let a = &self.aggregate;
        w.write_record([
            "AGGREGATE".to_string(),
            fmt_value(a.ssi),
            fmt_value(a.lncc),
            a.psnr.map_or("inf".into(), fmt_value),
        ])
        .map_err(csv_err)?;
        w.flush().map_err(|e| Error::Data(format!("writing report: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Human-readable summary with the aggregate in `LNCC | SSI | PSNR` order.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10}", "pair_id", "LNCC", "SSI", "PSNR");
        for r in &self.per_image {
            let _ = writeln!(
                s,
                "{:<24} {:>10.4} {:>10.4} {:>10}",
                r.pair_id,
                r.lncc,
                r.ssi,
                if r.psnr.is_finite() { format!("{:.3}", r.psnr) } else { "inf".into() }
            );
        }
        let a = &self.aggregate;
        let psnr = match a.psnr {
            Some(p) => format!("{p:.3}"),
            None => "inf-excluded".into(),
        };
        let _ = writeln!(s, "{:<24} {:>10.4} {:>10.4} {:>10}", "AGGREGATE", a.lncc, a.ssi, psnr);
        if a.psnr_excluded > 0 {
            let _ = writeln!(s, "({} infinite PSNR value(s) excluded from the mean)", a.psnr_excluded);
        }
        let c = &self.config;
        let _ = writeln!(
            s,
            "metric config: ssi_window={} ssi_sigma={} ssi_k1={} ssi_k2={} lncc_window={} lncc_eps={} data_range={}",
            c.ssi_window, c.ssi_sigma, c.ssi_k1, c.ssi_k2, c.lncc_window, c.lncc_eps, c.data_range
        );
        s
    }
}

/// Scores one enhanced/reference pair given in generator range.
pub fn score_pair(pair_id: &str, enhanced: &[f64], reference: &[f64], h: usize, w: usize, cfg: &MetricConfig) -> Result<ImageScore> {
    let e = to_unit_range(enhanced);
    let r = to_unit_range(reference);
    let (pe, pr) = (Plane::new(&e, h, w)?, Plane::new(&r, h, w)?);
    Ok(ImageScore {
        pair_id: pair_id.to_string(),
        ssi: ssi(&pe, &pr, cfg)?,
        lncc: lncc(&pe, &pr, cfg)?,
        psnr: psnr(&pe, &pr, cfg.data_range)?,
    })
}

/// Enhances every low image of `pairs` and scores it against its high reference.
pub fn evaluate_set(
    enhancer: &dyn Enhancer,
    pairs: &PairManifest,
    size: usize,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for entry in pairs.entries() {
        let scored = (|| {
            let low = preprocess(&entry.low_path, size)?;
            let high = preprocess(&entry.high_path, size)?;
            let enhanced = enhancer.enhance(&low)?;
            if enhanced.array().shape() != high.array().shape() {
                return Err(Error::Shape(format!(
                    "enhanced image has shape {:?}, reference {:?}",
                    enhanced.array().shape(),
                    high.array().shape()
                )));
            }
            score_pair(&entry.pair_id, enhanced.plane(0), high.plane(0), size, size, cfg)
        })()
        .map_err(|e| e.for_pair(&entry.pair_id))?;
        scores.push(scored);
    }
    MetricReport::from_scores(scores, *cfg)
}
