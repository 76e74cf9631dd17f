//! Dice similarity coefficient and normalised surface distance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Boundary tolerance in pixels.
    pub nsd_tolerance_px: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { nsd_tolerance_px: 2.0 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nsd_tolerance_px > 0.0 && self.nsd_tolerance_px.is_finite()) {
            return Err(Error::config(Module::Metrics, "nsd_tolerance_px must be > 0"));
        }
        Ok(())
    }
}

fn check(a: &[u8], b: &[u8], h: usize, w: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != h * w {
        return Err(Error::shape(format!("masks of {} and {} pixels for a {h}×{w} grid", a.len(), b.len())));
    }
    Ok(())
}

fn counts(pred: &[u8], gt: &[u8]) -> (usize, usize, usize) {
    let (mut i, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        i += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    (i, p, g)
}

fn dice_from(i: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let (i, p, g) = counts(pred, gt);
    Ok(dice_from(i, p, g))
}

/// Foreground pixels with at least one background 4-neighbour. Pixels
/// outside the grid count as background.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] != 0;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// Exact 1D squared distance transform over the finite entries of `f`.
fn dt1d(f: &[f64], out: &mut [f64], sites: &mut Vec<usize>, z: &mut Vec<f64>) {
    sites.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match sites.last() {
                None => {
                    sites.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&v) => {
                    let s = ((fq + (q * q) as f64) - (f[v] + (v * v) as f64)) / (2.0 * (q as f64 - v as f64));
                    if s <= *z.last().unwrap() {
                        sites.pop();
                        z.pop();
                    } else {
                        sites.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let v = sites[k];
        let d = q as f64 - v as f64;
        *o = f[v] + d * d;
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
pub fn squared_distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; h * w];
    let (mut s, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = if sites[y * w + x] { 0.0 } else { f64::INFINITY };
        }
        dt1d(&col, &mut col_out, &mut s, &mut z);
        for y in 0..h {
            g[y * w + x] = col_out[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        dt1d(&g[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w], &mut s, &mut z);
    }
    out
}

fn nsd_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, tol: f64) -> (usize, usize) {
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let dp = squared_distance_transform(&bp, h, w);
    let dg = squared_distance_transform(&bg, h, w);
    let t2 = tol * tol;
    let (mut hit, mut total) = (0, 0);
    for i in 0..h * w {
        if bp[i] {
            total += 1;
            hit += (dg[i] <= t2) as usize;
        }
        if bg[i] {
            total += 1;
            hit += (dp[i] <= t2) as usize;
        }
    }
    (hit, total)
}

/// Fraction of both boundaries lying within `τ` of the other boundary.
/// Both empty → 1; exactly one empty → 0.
pub fn nsd(pred: &[u8], gt: &[u8], h: usize, w: usize, cfg: &MetricConfig) -> Result<f64> {
    check(pred, gt, h, w)?;
    let (pe, ge) = (pred.iter().all(|&v| v == 0), gt.iter().all(|&v| v == 0));
    if pe && ge {
        return Ok(1.0);
    }
    if pe || ge {
        return Ok(0.0);
    }
    let (hit, total) = nsd_counts(pred, gt, h, w, cfg.nsd_tolerance_px);
    Ok(hit as f64 / total as f64)
}

/// DSC over a stack of slices (counts pooled across the volume).
pub fn dsc_3d(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted slices vs {} ground-truth slices", pred.len(), gt.len())));
    }
    let (mut i, mut p, mut g) = (0, 0, 0);
    for (a, b) in pred.iter().zip(gt) {
        if a.len() != b.len() {
            return Err(Error::shape("slice masks differ in size"));
        }
        let c = counts(a, b);
        i += c.0;
        p += c.1;
        g += c.2;
    }
    Ok(dice_from(i, p, g))
}

/// Slice-wise NSD averaged over the slices where either mask is non-empty.
pub fn nsd_3d(pred: &[Vec<u8>], gt: &[Vec<u8>], h: usize, w: usize, cfg: &MetricConfig) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted slices vs {} ground-truth slices", pred.len(), gt.len())));
    }
    let mut vals = Vec::new();
    for (a, b) in pred.iter().zip(gt) {
        check(a, b, h, w)?;
        if a.iter().any(|&v| v != 0) || b.iter().any(|&v| v != 0) {
            vals.push(nsd(a, b, h, w, cfg)?);
        }
    }
    Ok(if vals.is_empty() { 1.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 })
}

/// Metrics of one prompt (one box, 2D or 3D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub modality: String,
    pub dsc: f64,
    pub nsd: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub modality: String,
    pub dsc: f64,
    pub nsd: f64,
    pub runtime_s: f64,
    pub count: usize,
}

/// Per-modality means plus their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ModalityRow>,
    pub average: ModalityRow,
}

impl Report {
    pub fn from_cases(cases: &[CaseMetrics]) -> Report {
        let mut rows: Vec<ModalityRow> = Vec::new();
        for c in cases {
            let r = match rows.iter_mut().position(|r| r.modality == c.modality) {
                Some(i) => &mut rows[i],
                None => {
                    rows.push(ModalityRow { modality: c.modality.clone(), dsc: 0.0, nsd: 0.0, runtime_s: 0.0, count: 0 });
                    rows.last_mut().unwrap()
                }
            };
            r.dsc += c.dsc;
            r.nsd += c.nsd;
            r.runtime_s += c.runtime_s;
            r.count += 1;
        }
        for r in &mut rows {
            let n = r.count as f64;
            r.dsc /= n;
            r.nsd /= n;
            r.runtime_s /= n;
        }
        let m = rows.len().max(1) as f64;
        let average = ModalityRow {
            modality: "average".into(),
            dsc: rows.iter().map(|r| r.dsc).sum::<f64>() / m,
            nsd: rows.iter().map(|r| r.nsd).sum::<f64>() / m,
            runtime_s: rows.iter().map(|r| r.runtime_s).sum::<f64>() / m,
            count: rows.iter().map(|r| r.count).sum(),
        };
        Report { rows, average }
    }

    /// Largest minus smallest per-modality mean DSC.
    pub fn dsc_spread(&self) -> f64 {
        let it = || self.rows.iter().map(|r| r.dsc);
        it().fold(f64::NEG_INFINITY, f64::max) - it().fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("modality,dsc_pct,nsd_pct,runtime_s,cases\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "{},{:.4},{:.4},{:.6},{}", r.modality, 100.0 * r.dsc, 100.0 * r.nsd, r.runtime_s, r.count);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.modality.len()).max().unwrap_or(0).max(8);
        let mut s = format!("{:<w$}  {:>7}  {:>7}  {:>10}  {:>5}\n", "modality", "DSC%", "NSD%", "runtime s", "cases");
        for (i, r) in self.rows.iter().chain(std::iter::once(&self.average)).enumerate() {
            if i == self.rows.len() {
                let _ = writeln!(s, "{}", "-".repeat(w + 37));
            }
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.2}  {:>7.2}  {:>10.4}  {:>5}",
                r.modality,
                100.0 * r.dsc,
                100.0 * r.nsd,
                r.runtime_s,
                r.count
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, n: usize) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for y in y0..y0 + n {
            for x in x0..x0 + n {
                m[y * w + x] = 1;
            }
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let a = square(8, 8, 1, 1, 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &square(8, 8, 5, 5, 3)).unwrap(), 0.0);
        assert_eq!(dsc(&[0; 4], &[0; 4]).unwrap(), 1.0);
        // 2×3 blob shifted by one column: overlap 4 of 6.
        let mut p = vec![0u8; 16];
        let mut g = vec![0u8; 16];
        for y in 0..2 {
            for x in 0..3 {
                p[y * 4 + x] = 1;
                g[y * 4 + x + 1] = 1;
            }
        }
        assert!((dsc(&p, &g).unwrap() - 2.0 * 4.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn nsd_examples() {
        let c = MetricConfig::default();
        let a = square(16, 16, 3, 3, 6);
        assert_eq!(nsd(&a, &a, 16, 16, &c).unwrap(), 1.0);
        assert_eq!(nsd(&a, &square(16, 16, 4, 3, 6), 16, 16, &c).unwrap(), 1.0);
        let mut p = vec![0u8; 16 * 16];
        let mut g = vec![0u8; 16 * 16];
        p[2 * 16 + 2] = 1;
        g[2 * 16 + 12] = 1;
        assert_eq!(nsd(&p, &g, 16, 16, &c).unwrap(), 0.0);
        assert_eq!(nsd(&p, &vec![0; 256], 16, 16, &c).unwrap(), 0.0);
        assert_eq!(nsd(&vec![0; 256], &vec![0; 256], 16, 16, &c).unwrap(), 1.0);
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (7, 9);
        let mut s = vec![false; h * w];
        s[3] = true;
        s[40] = true;
        s[60] = true;
        let d = squared_distance_transform(&s, h, w);
        for y in 0..h {
            for x in 0..w {
                let best = s
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| {
                        let (dy, dx) = ((i / w) as f64 - y as f64, (i % w) as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[y * w + x], best);
            }
        }
        assert!(squared_distance_transform(&[false; 4], 2, 2).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn report_average_is_mean_of_modality_means() {
        let c = |m: &str, d: f64| CaseMetrics { modality: m.into(), dsc: d, nsd: d, runtime_s: 0.1 };
        let r = Report::from_cases(&[c("a", 1.0), c("a", 0.5), c("b", 0.2)]);
        assert_eq!(r.rows.len(), 2);
        assert!((r.average.dsc - (0.75 + 0.2) / 2.0).abs() < 1e-15);
        assert!((r.dsc_spread() - 0.55).abs() < 1e-15);
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}
