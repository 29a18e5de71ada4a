//! PSNR-based quality metrics and Bjøntegaard delta rate.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pcdata::{Component, PointCloud};

/// Peak value for 8-bit attributes.
pub const PEAK_8BIT: f64 = 255.0;

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(reference: &[f32], test: &[f32], peak: f64) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::Metric(format!(
            "psnr: reference has {} values, test has {}",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Metric("psnr: empty input".into()));
    }
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Metric(format!("psnr: peak must be positive, got {peak}")));
    }
    let sse: f64 = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    let mse = sse / reference.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

pub fn delta_psnr(enhanced: f64, anchor: f64) -> f64 {
    enhanced - anchor
}

/// `(6·y + cb + cr) / 8`; infinite if any input is.
pub fn ycbcr_psnr(y: f64, cb: f64, cr: f64) -> f64 {
    if y.is_infinite() || cb.is_infinite() || cr.is_infinite() {
        return f64::INFINITY;
    }
    (6.0 * y + cb + cr) / 8.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateDistortionPoint {
    /// Bits per input point.
    pub rate: f64,
    pub psnr: f64,
}

/// At least four points with strictly increasing rate and finite PSNR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateDistortionCurve {
    points: Vec<RateDistortionPoint>,
}

impl RateDistortionCurve {
    pub fn new(points: Vec<RateDistortionPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Metric(format!("a curve needs at least 4 points, got {}", points.len())));
        }
        for p in &points {
            if !(p.rate.is_finite() && p.rate > 0.0) {
                return Err(Error::Metric(format!("rate must be positive and finite, got {}", p.rate)));
            }
            if !p.psnr.is_finite() {
                return Err(Error::Metric(format!(
                    "PSNR {} at rate {} cannot be fitted (lossless or invalid point)",
                    p.psnr, p.rate
                )));
            }
        }
        for w in points.windows(2) {
            if w[1].rate <= w[0].rate {
                return Err(Error::Metric(format!("rates must increase strictly ({} then {})", w[0].rate, w[1].rate)));
            }
            if w[1].psnr < w[0].psnr {
                log::warn!("PSNR decreases from {} to {} as rate increases", w[0].psnr, w[1].psnr);
            }
        }
        Ok(RateDistortionCurve { points })
    }

    pub fn points(&self) -> &[RateDistortionPoint] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.psnr), hi.max(p.psnr)))
    }
}

/// Least-squares cubic `log10(rate) ≈ Σ c_i u^i` in the scaled variable
/// `u = (psnr − center) / scale`.
struct CubicFit {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl CubicFit {
    fn new(curve: &RateDistortionCurve) -> Result<Self> {
        let (lo, hi) = curve.psnr_range();
        let center = 0.5 * (lo + hi);
        let scale = if hi > lo { 0.5 * (hi - lo) } else { 1.0 };
        let mut ata = [[0f64; 4]; 4];
        let mut atb = [0f64; 4];
        for p in curve.points() {
            let u = (p.psnr - center) / scale;
            let row = [1.0, u, u * u, u * u * u];
            let y = p.rate.log10();
            for i in 0..4 {
                atb[i] += row[i] * y;
                for j in 0..4 {
                    ata[i][j] += row[i] * row[j];
                }
            }
        }
        let coef = solve4(ata, atb)
            .ok_or_else(|| Error::Metric("rate-distortion points are degenerate (repeated PSNR values)".into()))?;
        Ok(CubicFit { coef, center, scale })
    }

    /// Mean of the polynomial over `[a, b]` in PSNR.
    fn mean_over(&self, a: f64, b: f64) -> f64 {
        let ua = (a - self.center) / self.scale;
        let ub = (b - self.center) / self.scale;
        let prim = |u: f64| {
            let c = &self.coef;
            u * (c[0] + u * (c[1] / 2.0 + u * (c[2] / 3.0 + u * c[3] / 4.0)))
        };
        (prim(ub) - prim(ua)) / (ub - ua)
    }
}

/// Gaussian elimination with partial pivoting.
pub(crate) fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..4 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0f64; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Classic Bjøntegaard delta rate in percent: negative means the test
/// curve needs fewer bits for the same quality.
pub fn bd_rate(anchor: &RateDistortionCurve, test: &RateDistortionCurve) -> Result<f64> {
    let (alo, ahi) = anchor.psnr_range();
    let (tlo, thi) = test.psnr_range();
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if !(hi > lo) {
        return Err(Error::Metric(format!(
            "PSNR ranges do not overlap: anchor [{alo}, {ahi}], test [{tlo}, {thi}]"
        )));
    }
    let fa = CubicFit::new(anchor)?;
    let ft = CubicFit::new(test)?;
    let diff = ft.mean_over(lo, hi) - fa.mean_over(lo, hi);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// JSON encoding of PSNR values: finite numbers as numbers, infinities as
/// the strings `"inf"` / `"-inf"`.
pub mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize, Serialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("invalid number '{t}'"))),
            },
        }
    }
}

/// PSNR of each component and their 6:1:1 combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentPsnr {
    #[serde(with = "json_f64")]
    pub y: f64,
    #[serde(with = "json_f64")]
    pub cb: f64,
    #[serde(with = "json_f64")]
    pub cr: f64,
    #[serde(with = "json_f64")]
    pub ycbcr: f64,
}

impl ComponentPsnr {
    pub fn new(y: f64, cb: f64, cr: f64) -> Self {
        ComponentPsnr { y, cb, cr, ycbcr: ycbcr_psnr(y, cb, cr) }
    }

    fn zip(self, o: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        ComponentPsnr { y: f(self.y, o.y), cb: f(self.cb, o.cb), cr: f(self.cr, o.cr), ycbcr: f(self.ycbcr, o.ycbcr) }
    }

    pub fn get(&self, c: Option<Component>) -> f64 {
        match c {
            Some(Component::Y) => self.y,
            Some(Component::Cb) => self.cb,
            Some(Component::Cr) => self.cr,
            None => self.ycbcr,
        }
    }
}

/// Per-component PSNR of `test` against `reference`, matching points by
/// coordinate.
pub fn frame_psnr(reference: &PointCloud, test: &PointCloud) -> Result<ComponentPsnr> {
    if reference.len() != test.len() {
        return Err(Error::Metric(format!(
            "frames differ in size: reference {} points, test {}",
            reference.len(),
            test.len()
        )));
    }
    let lookup: HashMap<[u32; 3], [f32; 3]> =
        test.geometry().iter().copied().zip(test.attributes().iter().copied()).collect();
    let mut r = [Vec::with_capacity(reference.len()), Vec::new(), Vec::new()];
    let mut t = [Vec::with_capacity(reference.len()), Vec::new(), Vec::new()];
    for (p, a) in reference.geometry().iter().zip(reference.attributes()) {
        let b = lookup
            .get(p)
            .ok_or_else(|| Error::Metric(format!("point {p:?} missing from the test frame")))?;
        for c in 0..3 {
            r[c].push(a[c]);
            t[c].push(b[c]);
        }
    }
    Ok(ComponentPsnr::new(
        psnr(&r[0], &t[0], PEAK_8BIT)?,
        psnr(&r[1], &t[1], PEAK_8BIT)?,
        psnr(&r[2], &t[2], PEAK_8BIT)?,
    ))
}

/// One row of the rate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateEntry {
    pub label: String,
    pub bpip: f64,
}

/// `{"rates": [{"label": "r01", "bpip": 0.12}, ...]}`, ordered by increasing
/// rate. Labels name per-rate subdirectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateTable {
    pub rates: Vec<RateEntry>,
}

impl RateTable {
    pub fn parse(text: &str) -> Result<Self> {
        let t: RateTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("rate table is empty".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.rates {
            let ok = !r.label.is_empty()
                && r.label != "."
                && r.label != ".."
                && !r.label.contains(['/', '\\', '\0']);
            if !ok {
                return Err(Error::Config(format!("invalid rate label '{}'", r.label)));
            }
            if !seen.insert(r.label.as_str()) {
                return Err(Error::Config(format!("duplicate rate label '{}'", r.label)));
            }
            if !(r.bpip.is_finite() && r.bpip > 0.0) {
                return Err(Error::Config(format!("rate '{}': bpip must be positive, got {}", r.label, r.bpip)));
            }
        }
        for w in self.rates.windows(2) {
            if w[1].bpip <= w[0].bpip {
                return Err(Error::Config(format!(
                    "rates must be listed in strictly increasing bpip ('{}' then '{}')",
                    w[0].label, w[1].label
                )));
            }
        }
        Ok(())
    }
}

/// Frames of one sequence at one rate point.
#[derive(Clone, Debug)]
pub struct RateFrames {
    pub entry: RateEntry,
    pub anchor: Vec<PointCloud>,
    pub enhanced: Vec<PointCloud>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub anchor: ComponentPsnr,
    pub enhanced: ComponentPsnr,
    pub delta: ComponentPsnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub label: String,
    pub bpip: f64,
    pub frames: Vec<FrameReport>,
    /// Mean over frames.
    pub anchor: ComponentPsnr,
    pub enhanced: ComponentPsnr,
    pub delta: ComponentPsnr,
}

/// BD-rate of the enhanced curve against the anchor curve, or why it could
/// not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdRateEntry {
    pub percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdRateReport {
    pub y: BdRateEntry,
    pub cb: BdRateEntry,
    pub cr: BdRateEntry,
    pub ycbcr: BdRateEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub frame_count: usize,
    pub rates: Vec<RateReport>,
    pub bd_rate: BdRateReport,
}

impl SequenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn mean_psnr(frames: &[ComponentPsnr]) -> ComponentPsnr {
    let n = frames.len() as f64;
    let mean = |f: fn(&ComponentPsnr) -> f64| frames.iter().map(f).sum::<f64>() / n;
    ComponentPsnr { y: mean(|p| p.y), cb: mean(|p| p.cb), cr: mean(|p| p.cr), ycbcr: mean(|p| p.ycbcr) }
}

fn bd_entry(rates: &[RateReport], c: Option<Component>) -> BdRateEntry {
    let curve = |pick: fn(&RateReport) -> &ComponentPsnr| {
        RateDistortionCurve::new(
            rates.iter().map(|r| RateDistortionPoint { rate: r.bpip, psnr: pick(r).get(c) }).collect(),
        )
    };
    match curve(|r| &r.anchor).and_then(|a| curve(|r| &r.enhanced).and_then(|t| bd_rate(&a, &t))) {
        Ok(v) => BdRateEntry { percent: Some(v), error: None },
        Err(e) => BdRateEntry { percent: None, error: Some(e.to_string()) },
    }
}

/// Per-frame and per-rate PSNR of anchor and enhanced frames against the
/// originals, plus BD-rate per component across rates.
pub fn evaluate_sequence(rates: &[RateFrames], originals: &[PointCloud]) -> Result<SequenceReport> {
    if rates.is_empty() || originals.is_empty() {
        return Err(Error::Metric("nothing to evaluate".into()));
    }
    let mut out = Vec::with_capacity(rates.len());
    for r in rates {
        if r.anchor.len() != originals.len() || r.enhanced.len() != originals.len() {
            return Err(Error::Metric(format!(
                "rate '{}': {} anchor and {} enhanced frames for {} originals",
                r.entry.label,
                r.anchor.len(),
                r.enhanced.len(),
                originals.len()
            )));
        }
        let mut frames = Vec::with_capacity(originals.len());
        for (i, orig) in originals.iter().enumerate() {
            let anchor = frame_psnr(orig, &r.anchor[i])?;
            let enhanced = frame_psnr(orig, &r.enhanced[i])?;
            frames.push(FrameReport { frame: i, anchor, enhanced, delta: enhanced.zip(anchor, delta_psnr) });
        }
        let anchor = mean_psnr(&frames.iter().map(|f| f.anchor).collect::<Vec<_>>());
        let enhanced = mean_psnr(&frames.iter().map(|f| f.enhanced).collect::<Vec<_>>());
        out.push(RateReport {
            label: r.entry.label.clone(),
            bpip: r.entry.bpip,
            frames,
            anchor,
            delta: enhanced.zip(anchor, delta_psnr),
            enhanced,
        });
    }
    let bd_rate = BdRateReport {
        y: bd_entry(&out, Some(Component::Y)),
        cb: bd_entry(&out, Some(Component::Cb)),
        cr: bd_entry(&out, Some(Component::Cr)),
        ycbcr: bd_entry(&out, None),
    };
    Ok(SequenceReport { frame_count: originals.len(), rates: out, bd_rate })
}
