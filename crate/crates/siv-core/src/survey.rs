//! Ground-state-splitting survey: grouping photoluminescence peaks into SiV quadruples and
//! sampling assignment configurations to estimate the splitting distribution.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SivError};
use crate::rng;

/// Smallest ground-state splitting of an unstrained SiV.
pub const MIN_GROUND_SPLITTING: f64 = 48e9;
/// Smallest excited-state splitting of an unstrained SiV.
pub const MIN_EXCITED_SPLITTING: f64 = 259e9;
pub const DEFAULT_TOLERANCE: f64 = 2e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub freq: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSpectrum {
    pub cavity_id: String,
    pub peaks: Vec<Peak>,
}

impl PeakSpectrum {
    /// Sorts the peaks ascending.
    pub fn new(cavity_id: impl Into<String>, mut peaks: Vec<Peak>) -> Result<Self> {
        if peaks.iter().any(|p| !p.freq.is_finite()) {
            return Err(invalid("peaks", "frequencies must be finite"));
        }
        peaks.sort_by(|a, b| a.freq.total_cmp(&b.freq));
        Ok(Self { cavity_id: cavity_id.into(), peaks })
    }
}

/// One SiV: transitions A > B, C > D with A−B = C−D (ground) and A−C = B−D (excited).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SiVAssignment {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Peak indices of A, B, C, D in the sorted spectrum.
    pub peaks: [usize; 4],
}

impl SiVAssignment {
    pub fn delta_gs(&self) -> f64 {
        self.c - self.d
    }

    /// The two splitting floors, equal ground splittings within `tol`, and the excited
    /// splitting above the ground one. Without the last condition every SiV with a ground
    /// splitting above 259 GHz also matches with the two roles swapped.
    pub fn satisfies(&self, tol: f64) -> bool {
        self.a - self.b > MIN_GROUND_SPLITTING
            && self.a - self.c > MIN_EXCITED_SPLITTING
            && self.a - self.c > self.a - self.b
            && ((self.a - self.b) - (self.c - self.d)).abs() <= tol
    }
}

/// Every 4-peak set that can be one SiV.
pub fn match_quadruples(spectrum: &PeakSpectrum, tol: f64) -> Result<Vec<SiVAssignment>> {
    if !(tol >= 0.0) {
        return Err(invalid("survey.tolerance", "must be >= 0"));
    }
    let f: Vec<f64> = spectrum.peaks.iter().map(|p| p.freq).collect();
    if f.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("peaks", "must be sorted ascending"));
    }
    let n = f.len();
    let mut out = Vec::new();
    if n < 4 {
        return Ok(out);
    }
    // ground-splitting pairs (hi, lo) with hi − lo > 48 GHz
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for hi in 0..n {
        for lo in 0..hi {
            let d = f[hi] - f[lo];
            if d > MIN_GROUND_SPLITTING {
                pairs.push((d, hi, lo));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut seen = BTreeSet::new();
    for &(dab, a, b) in &pairs {
        // partners with a matching splitting lie in a window of the sorted list
        let start = pairs.partition_point(|p| p.0 < dab - tol);
        for &(dcd, c, d) in &pairs[start..] {
            if dcd > dab + tol {
                break;
            }
            if c == a || c == b || d == a || d == b {
                continue;
            }
            let cand = SiVAssignment { a: f[a], b: f[b], c: f[c], d: f[d], peaks: [a, b, c, d] };
            if cand.satisfies(tol) && seen.insert(cand.peaks) {
                out.push(cand);
            }
        }
    }
    out.sort_by_key(|x| x.peaks);
    Ok(out)
}

const MAX_PACKINGS: usize = 2_000_000;

/// Every maximal set of peak-disjoint quadruples, as sorted candidate indices.
pub fn maximal_packings(cands: &[SiVAssignment]) -> Result<Vec<Vec<usize>>> {
    fn overlaps(x: &SiVAssignment, y: &SiVAssignment) -> bool {
        x.peaks.iter().any(|p| y.peaks.contains(p))
    }
    fn rec(
        cands: &[SiVAssignment],
        k: usize,
        chosen: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) -> Result<()> {
        if k == cands.len() {
            // maximal when every skipped candidate clashes with something chosen
            let maximal = (0..cands.len())
                .filter(|i| !chosen.contains(i))
                .all(|i| chosen.iter().any(|&c| overlaps(&cands[i], &cands[c])));
            if maximal {
                if out.len() >= MAX_PACKINGS {
                    return Err(SivError::DimensionOverflow { dim: out.len(), max: MAX_PACKINGS });
                }
                out.push(chosen.clone());
            }
            return Ok(());
        }
        if chosen.iter().all(|&c| !overlaps(&cands[k], &cands[c])) {
            chosen.push(k);
            rec(cands, k + 1, chosen, out)?;
            chosen.pop();
            // skipping k only leads somewhere maximal if a later pick can block it
            let blockable = chosen.iter().any(|&c| overlaps(&cands[k], &cands[c]))
                || (k + 1..cands.len()).any(|j| overlaps(&cands[k], &cands[j]));
            if !blockable {
                return Ok(());
            }
        }
        rec(cands, k + 1, chosen, out)
    }
    let mut out = Vec::new();
    if !cands.is_empty() {
        rec(cands, 0, &mut Vec::new(), &mut out)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavityCandidates {
    pub cavity_id: String,
    pub candidates: Vec<SiVAssignment>,
    /// Maximal packings grouped by size; index n holds those with n quadruples.
    pub packings_by_size: Vec<Vec<Vec<usize>>>,
    pub min_count: usize,
    pub max_count: usize,
}

pub fn cavity_candidates(spectrum: &PeakSpectrum, tol: f64) -> Result<CavityCandidates> {
    let candidates = match_quadruples(spectrum, tol)?;
    let packings = maximal_packings(&candidates)?;
    let max_count = packings.iter().map(Vec::len).max().unwrap_or(0);
    let min_count = packings.iter().map(Vec::len).min().unwrap_or(0);
    let mut by_size = vec![Vec::new(); max_count + 1];
    for p in packings {
        by_size[p.len()].push(p);
    }
    Ok(CavityCandidates { cavity_id: spectrum.cavity_id.clone(), candidates, packings_by_size: by_size, min_count, max_count })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingHistogram {
    /// Every sampled ground-state splitting, Hz.
    pub samples: Vec<f64>,
    /// SiVs assigned in each repeat, summed over cavities.
    pub assigned_per_repeat: Vec<usize>,
    /// Cavity draws skipped because no maximal packing has the drawn size.
    pub skipped: u64,
    pub repeats: u64,
}

impl SplittingHistogram {
    /// Counts per bin of width `width`, keyed by the bin's lower edge.
    pub fn bins(&self, width: f64) -> Result<Vec<(f64, u64)>> {
        if !(width > 0.0) {
            return Err(invalid("bin_width", "must be positive"));
        }
        let mut map = std::collections::BTreeMap::new();
        for &s in &self.samples {
            *map.entry((s / width).floor() as i64).or_insert(0u64) += 1;
        }
        Ok(map.into_iter().map(|(k, c)| (k as f64 * width, c)).collect())
    }
}

/// Per repeat and cavity: n ~ N(μ, σ) rounded and clipped to the cavity's packing range,
/// then one of the maximal packings with exactly n quadruples, uniformly.
pub fn sample_distribution(
    spectra: &[PeakSpectrum],
    mu: f64,
    sigma: f64,
    repeats: u64,
    tol: f64,
    seed: u64,
) -> Result<SplittingHistogram> {
    if spectra.is_empty() {
        return Err(SivError::Empty("no spectra".into()));
    }
    if !(sigma >= 0.0) || !mu.is_finite() {
        return Err(invalid("survey.sigma", "need finite μ and σ >= 0"));
    }
    if repeats == 0 {
        return Err(invalid("repeats", "must be positive"));
    }
    let cavities: Vec<CavityCandidates> =
        spectra.iter().map(|s| cavity_candidates(s, tol)).collect::<Result<_>>()?;
    let tags: Vec<String> = cavities.iter().map(|c| format!("survey/{}", c.cavity_id)).collect();
    let normal = Normal::new(mu, sigma.max(1e-12)).map_err(|e| invalid("survey.sigma", e.to_string()))?;
    let per_repeat: Vec<(Vec<f64>, u64)> = (0..repeats)
        .into_par_iter()
        .map(|rep| {
            let mut vals = Vec::new();
            let mut skipped = 0;
            for (cav, tag) in cavities.iter().zip(&tags) {
                if cav.candidates.is_empty() {
                    continue;
                }
                // one stream per cavity keeps the pooled result independent of input order
                let mut r = rng::stream(seed, tag, rep);
                let draw: f64 = normal.sample(&mut r);
                let n = (draw.round().max(0.0) as usize).clamp(cav.min_count, cav.max_count);
                match cav.packings_by_size[n].choose(&mut r) {
                    Some(p) => vals.extend(p.iter().map(|&k| cav.candidates[k].delta_gs())),
                    None => skipped += 1,
                }
            }
            (vals, skipped)
        })
        .collect();
    let mut hist = SplittingHistogram { samples: Vec::new(), assigned_per_repeat: Vec::new(), skipped: 0, repeats };
    for (vals, skipped) in per_repeat {
        hist.assigned_per_repeat.push(vals.len());
        hist.samples.extend(vals);
        hist.skipped += skipped;
    }
    Ok(hist)
}

/// Fraction of samples above `threshold` with its binomial standard error.
pub fn fraction_above(hist: &SplittingHistogram, threshold: f64) -> Result<(f64, f64)> {
    let n = hist.samples.len();
    if n == 0 {
        return Err(SivError::Empty("histogram has no samples".into()));
    }
    let k = hist.samples.iter().filter(|&&s| s > threshold).count();
    let p = k as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

/// Ground-truth SiV used to build synthetic spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlantedSiV {
    pub cavity: usize,
    pub delta_gs: f64,
    pub delta_es: f64,
    pub c_line: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEnsemble {
    pub cavities: usize,
    pub sivs_per_cavity: usize,
    /// Exact share of SiVs planted above 400 GHz.
    pub high_fraction: f64,
    /// Full width of the uniform jitter added to every peak, Hz.
    pub jitter: f64,
    /// Width of the band the C lines are spread over, Hz.
    pub spread: f64,
}

impl Default for SyntheticEnsemble {
    fn default() -> Self {
        Self { cavities: 20, sivs_per_cavity: 3, high_fraction: 0.12, jitter: 0.2e9, spread: 4e12 }
    }
}

pub fn synthetic_spectra(cfg: &SyntheticEnsemble, seed: u64) -> Result<(Vec<PeakSpectrum>, Vec<PlantedSiV>)> {
    if cfg.cavities == 0 || cfg.sivs_per_cavity == 0 {
        return Err(invalid("survey.synthetic", "need at least one cavity and SiV"));
    }
    if !(0.0..=1.0).contains(&cfg.high_fraction) || !(cfg.jitter >= 0.0) || !(cfg.spread > 0.0) {
        return Err(invalid("survey.synthetic", "fraction in [0, 1], jitter >= 0, spread > 0"));
    }
    let total = cfg.cavities * cfg.sivs_per_cavity;
    let n_high = (cfg.high_fraction * total as f64).round() as usize;
    let mut r = rng::stream(seed, "synthetic_survey", 0);
    let mut high: Vec<bool> = (0..total).map(|i| i < n_high).collect();
    high.shuffle(&mut r);
    let mut planted = Vec::with_capacity(total);
    let mut spectra = Vec::with_capacity(cfg.cavities);
    for cav in 0..cfg.cavities {
        let mut peaks = Vec::new();
        for k in 0..cfg.sivs_per_cavity {
            let idx = cav * cfg.sivs_per_cavity + k;
            let dgs = if high[idx] { r.random_range(410e9..650e9) } else { r.random_range(60e9..390e9) };
            // strain widens the excited manifold roughly in step with the ground one
            let des = MIN_EXCITED_SPLITTING + 1.5 * (dgs - MIN_GROUND_SPLITTING) + r.random_range(10e9..150e9);
            let c_line = 406.7e12 + r.random_range(-0.5..0.5) * cfg.spread;
            planted.push(PlantedSiV { cavity: cav, delta_gs: dgs, delta_es: des, c_line });
            for line in [c_line + des, c_line + des - dgs, c_line, c_line - dgs] {
                let j = if cfg.jitter > 0.0 { r.random_range(-0.5..0.5) * cfg.jitter } else { 0.0 };
                peaks.push(Peak { freq: line + j, intensity: r.random_range(0.2..1.0) });
            }
        }
        spectra.push(PeakSpectrum::new(format!("cavity{cav:02}"), peaks)?);
    }
    Ok((spectra, planted))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn siv_peaks(c: f64, dgs: f64, des: f64) -> Vec<Peak> {
        [c + des, c + des - dgs, c, c - dgs].iter().map(|&f| Peak { freq: f, intensity: 1.0 }).collect()
    }

    #[test]
    fn single_siv_is_found() {
        let s = PeakSpectrum::new("x", siv_peaks(406.7e12, 100e9, 300e9)).unwrap();
        let m = match_quadruples(&s, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(m.len(), 1);
        assert!((m[0].delta_gs() - 100e9).abs() < 1.0);
    }

    #[test]
    fn floor_violations_are_empty() {
        let s = PeakSpectrum::new("x", siv_peaks(406.7e12, 40e9, 300e9)).unwrap();
        assert!(match_quadruples(&s, DEFAULT_TOLERANCE).unwrap().is_empty());
        let s = PeakSpectrum::new("x", siv_peaks(406.7e12, 100e9, 200e9)).unwrap();
        assert!(match_quadruples(&s, DEFAULT_TOLERANCE).unwrap().is_empty());
        let few = PeakSpectrum::new("x", siv_peaks(406.7e12, 100e9, 300e9)[..3].to_vec()).unwrap();
        assert!(match_quadruples(&few, DEFAULT_TOLERANCE).unwrap().is_empty());
    }

    #[test]
    fn three_jittered_sivs_recovered() {
        let cfg = SyntheticEnsemble { cavities: 1, sivs_per_cavity: 3, high_fraction: 0.0, jitter: 1e9, spread: 4e12 };
        let (spectra, planted) = synthetic_spectra(&cfg, 11).unwrap();
        let m = match_quadruples(&spectra[0], DEFAULT_TOLERANCE).unwrap();
        for p in &planted {
            assert!(m.iter().any(|q| (q.delta_gs() - p.delta_gs).abs() <= 2.0 * DEFAULT_TOLERANCE && (q.c - p.c_line).abs() < 1e9));
        }
    }

    #[test]
    fn single_candidate_histogram_is_degenerate() {
        let s = PeakSpectrum::new("x", siv_peaks(406.7e12, 123e9, 300e9)).unwrap();
        let h = sample_distribution(&[s], 1.0, 2.0, 200, DEFAULT_TOLERANCE, 3).unwrap();
        assert_eq!(h.samples.len(), 200);
        assert!(h.samples.iter().all(|&v| (v - 123e9).abs() < 1.0));
        assert_eq!(fraction_above(&h, 0.0).unwrap().0, 1.0);
        assert_eq!(fraction_above(&h, 1e12).unwrap().0, 0.0);
    }

    #[test]
    fn sampling_is_seeded_and_conserves_mass() {
        let (spectra, _) = synthetic_spectra(&SyntheticEnsemble::default(), 2).unwrap();
        let a = sample_distribution(&spectra, 5.0, 2.0, 300, DEFAULT_TOLERANCE, 9).unwrap();
        let b = sample_distribution(&spectra, 5.0, 2.0, 300, DEFAULT_TOLERANCE, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), a.assigned_per_repeat.iter().sum::<usize>());
        let binned: u64 = a.bins(10e9).unwrap().iter().map(|b| b.1).sum();
        assert_eq!(binned as usize, a.samples.len());
    }

    #[test]
    fn empty_histogram_rejected() {
        let h = SplittingHistogram { samples: vec![], assigned_per_repeat: vec![], skipped: 0, repeats: 1 };
        assert!(fraction_above(&h, 400e9).is_err());
    }
}
