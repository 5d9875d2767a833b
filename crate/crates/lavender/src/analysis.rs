//! Measurement instruments: entropy, KL divergence, entropy histograms,
//! and the alignment-loss-vs-accuracy calibration series.
//!
//! All entropies are natural-log (nats). A uniform 32x32 map tops out at
//! ln(1024) ≈ 6.9315 nats; the whole premise of alignment is that teacher
//! maps sit far below that while untrained student maps sit near it.

use crate::error::{Error, Result};
use crate::teacher::{SaliencyMap, MAP_CELLS};
use crate::train::TrainLog;

/// Which population a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapGroup {
    Teacher,
    StudentPre,
    StudentPost,
}

impl MapGroup {
    pub fn label(&self) -> &'static str {
        match self {
            MapGroup::Teacher => "teacher",
            MapGroup::StudentPre => "student-pre",
            MapGroup::StudentPost => "student-post",
        }
    }
}

/// Entropies plus a fixed-range histogram over [0, ln 1024].
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub group: MapGroup,
    pub entropies: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl EntropyReport {
    pub fn mean(&self) -> f64 {
        if self.entropies.is_empty() {
            return 0.0;
        }
        self.entropies.iter().sum::<f64>() / self.entropies.len() as f64
    }
}

const NORM_TOL: f64 = 1e-6;

/// Shannon entropy of a normalized map in nats, with 0·log 0 := 0.
pub fn map_entropy(map: &SaliencyMap) -> Result<f64> {
    entropy_of(&map.grid_f64())
}

/// Entropy of any normalized distribution slice.
pub fn entropy_of(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized { word: "<distribution>".into(), sum });
    }
    let h: f64 = p.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum();
    if !h.is_finite() {
        return Err(Error::NonFiniteInFile { what: "entropy".into() });
    }
    Ok(h)
}

/// KL(p ‖ q) in nats with epsilon-smoothing on q: q' = (q + eps) / Z.
/// Always non-negative up to float noise.
pub fn kl_divergence(p: &SaliencyMap, q: &SaliencyMap, epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Invalid { op: "kl_divergence", detail: "epsilon must be > 0".into() });
    }
    let pv = p.grid_f64();
    let qv = q.grid_f64();
    let p_sum: f64 = pv.iter().sum();
    let q_sum: f64 = qv.iter().sum();
    if (p_sum - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized { word: p.word().to_string(), sum: p_sum });
    }
    if (q_sum - 1.0).abs() > NORM_TOL {
        return Err(Error::Unnormalized { word: q.word().to_string(), sum: q_sum });
    }
    let z = q_sum + epsilon * qv.len() as f64;
    let mut kl = 0.0;
    for (pi, qi) in pv.iter().zip(&qv) {
        if *pi > 0.0 {
            kl += pi * (pi / ((qi + epsilon) / z)).ln();
        }
    }
    if !kl.is_finite() {
        return Err(Error::NonFiniteInFile { what: "kl divergence".into() });
    }
    Ok(kl)
}

/// Histogram of map entropies over uniform bins spanning [0, ln 1024].
pub fn entropy_histogram(maps: &[SaliencyMap], n_bins: usize, group: MapGroup) -> Result<EntropyReport> {
    if n_bins == 0 {
        return Err(Error::Invalid { op: "entropy_histogram", detail: "n_bins must be >= 1".into() });
    }
    if maps.is_empty() {
        return Err(Error::Invalid { op: "entropy_histogram", detail: "no maps".into() });
    }
    let hi = (MAP_CELLS as f64).ln();
    let entropies: Vec<f64> = maps.iter().map(map_entropy).collect::<Result<_>>()?;
    let edges: Vec<f64> = (0..=n_bins).map(|i| hi * i as f64 / n_bins as f64).collect();
    let mut counts = vec![0usize; n_bins];
    for &h in &entropies {
        let mut bin = ((h / hi) * n_bins as f64).floor() as usize;
        if bin >= n_bins {
            bin = n_bins - 1; // the top edge belongs to the last bin
        }
        counts[bin] += 1;
    }
    Ok(EntropyReport { group, entropies, bin_edges: edges, counts })
}

/// One (alignment loss, task metric) pair per epoch.
#[derive(Debug, Clone)]
pub struct CalibrationSeries {
    pub points: Vec<(f64, f64)>,
    /// Pearson correlation; `None` when either series is constant.
    pub pearson: Option<f64>,
}

/// Pair epoch-mean alignment loss with the per-epoch evaluation metric.
/// Requires at least 3 epochs with recorded metrics.
pub fn calibration_series(log: &TrainLog) -> Result<CalibrationSeries> {
    let points: Vec<(f64, f64)> = log
        .epochs
        .iter()
        .filter_map(|e| e.eval_accuracy.map(|acc| (e.mean_l_att, acc)))
        .collect();
    if points.len() < 3 {
        return Err(Error::Invalid {
            op: "calibration_series",
            detail: format!("need >= 3 epochs with eval metrics, have {}", points.len()),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    Ok(CalibrationSeries { pearson: pearson(&xs, &ys), points })
}

/// Pearson correlation coefficient; `None` for constant inputs.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Write an entropy report as CSV (`index,entropy`) plus a two-column
/// gnuplot-friendly histogram (`bin_center count`).
pub fn write_entropy_report(report: &EntropyReport, csv: &std::path::Path, hist: &std::path::Path) -> Result<()> {
    let mut s = String::from("index,entropy_nats\n");
    for (i, h) in report.entropies.iter().enumerate() {
        s.push_str(&format!("{i},{h}\n"));
    }
    std::fs::write(csv, s)?;

    let mut t = String::new();
    for (i, c) in report.counts.iter().enumerate() {
        let center = 0.5 * (report.bin_edges[i] + report.bin_edges[i + 1]);
        t.push_str(&format!("{center} {c}\n"));
    }
    std::fs::write(hist, t)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::MAP_CELLS;

    fn uniform_map() -> SaliencyMap {
        SaliencyMap::from_f64("u", &vec![1.0 / MAP_CELLS as f64; MAP_CELLS]).unwrap()
    }

    fn one_hot_map(at: usize) -> SaliencyMap {
        let mut v = vec![0.0f64; MAP_CELLS];
        v[at] = 1.0;
        SaliencyMap::from_f64("h", &v).unwrap()
    }

    #[test]
    fn uniform_entropy_is_ln_1024() {
        let h = map_entropy(&uniform_map()).unwrap();
        assert!((h - (1024f64).ln()).abs() < 1e-9);
        assert!((h - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn one_hot_entropy_is_zero() {
        assert_eq!(map_entropy(&one_hot_map(17)).unwrap(), 0.0);
    }

    #[test]
    fn two_cell_entropy_is_ln_2() {
        let mut v = vec![0.0f64; MAP_CELLS];
        v[0] = 0.5;
        v[1] = 0.5;
        let m = SaliencyMap::from_f64("t", &v).unwrap();
        assert!((map_entropy(&m).unwrap() - (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_entropy_is_rejected() {
        assert!(entropy_of(&[0.25, 0.25]).is_err());
    }

    #[test]
    fn kl_identity_is_zero() {
        let m = uniform_map();
        let kl = kl_divergence(&m, &m, 1e-8).unwrap();
        assert!(kl.abs() < 1e-9);
    }

    #[test]
    fn kl_one_hot_vs_uniform() {
        let kl = kl_divergence(&one_hot_map(5), &uniform_map(), 1e-8).unwrap();
        assert!((kl - (1024f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn kl_matches_brute_force_on_random_pair() {
        let mut rng = crate::rng::stream(15, crate::rng::Stream::Other(50));
        let eps = 1e-8;
        let mk = |rng: &mut rand_chacha::ChaCha12Rng| {
            use rand::Rng;
            let mut v: Vec<f64> = (0..MAP_CELLS).map(|_| rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            SaliencyMap::from_f64("r", &v).unwrap()
        };
        let p = mk(&mut rng);
        let q = mk(&mut rng);
        let got = kl_divergence(&p, &q, eps).unwrap();

        let pv = p.grid_f64();
        let qv = q.grid_f64();
        let z: f64 = qv.iter().map(|x| x + eps).sum();
        let brute: f64 = pv
            .iter()
            .zip(&qv)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / ((qi + eps) / z)).ln())
            .sum();
        assert!((got - brute).abs() < 1e-12);
        assert!(got >= -1e-12, "KL must be non-negative, got {got}");
    }

    #[test]
    fn histogram_buckets_uniform_and_one_hot() {
        let report = entropy_histogram(&[uniform_map(), uniform_map()], 10, MapGroup::Teacher).unwrap();
        assert_eq!(report.counts.iter().sum::<usize>(), 2);
        assert_eq!(report.counts[9], 2, "uniform maps land in the top bin");

        let mixed = entropy_histogram(&[uniform_map(), one_hot_map(1)], 10, MapGroup::Teacher).unwrap();
        assert_eq!(mixed.counts[0], 1);
        assert_eq!(mixed.counts[9], 1);
        assert_eq!(mixed.counts.iter().filter(|c| **c > 0).count(), 2);
    }

    #[test]
    fn histogram_matches_recount_on_generated_maps() {
        use crate::teacher::{synth_teacher, SceneSpec};
        let mut maps = Vec::new();
        for i in 0..200 {
            let scene = SceneSpec { rows: 4, cols: 4, cells: vec![(i % 16, "w".into())] };
            let sigma = 0.5 + (i % 7) as f64 * 0.5;
            maps.push(synth_teacher(&scene, sigma).unwrap().maps()[0].clone());
        }
        let report = entropy_histogram(&maps, 16, MapGroup::Teacher).unwrap();
        // Recount by hand.
        let hi = (MAP_CELLS as f64).ln();
        let mut counts = vec![0usize; 16];
        for m in &maps {
            let h = map_entropy(m).unwrap();
            let bin = (((h / hi) * 16.0).floor() as usize).min(15);
            counts[bin] += 1;
        }
        assert_eq!(report.counts, counts);
        assert_eq!(report.counts.iter().sum::<usize>(), maps.len());
    }

    #[test]
    fn zero_bins_rejected() {
        assert!(entropy_histogram(&[uniform_map()], 0, MapGroup::Teacher).is_err());
    }

    #[test]
    fn pearson_anticorrelated_is_minus_one() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [8.0, 6.0, 4.0, 2.0];
        let r = pearson(&xs, &ys).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_is_absent() {
        assert!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).is_none());
    }
}
