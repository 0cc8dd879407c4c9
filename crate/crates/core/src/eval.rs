//! Per-slide metrics, cross-fold gene ranking and patient-grouped fold
//! construction.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplex_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Size of the highly predictive gene set.
pub const TOP_GENES: usize = 50;

/// Copies a rank-2 tensor into an `f64` matrix.
pub fn to_array<T: Real>(t: &Tensor<T>) -> Array2<f64> {
    let (n, m) = (t.shape()[0], t.numel() / t.shape()[0]);
    Array2::from_shape_vec((n, m), t.data().iter().map(|v| v.to_f64_lossy()).collect())
        .expect("shape matches data")
}

fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation of every gene column. Genes with zero
/// variance in either matrix are undefined (`None`).
pub fn pcc_per_gene(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<Option<f64>>> {
    check_shapes(pred, truth)?;
    if pred.nrows() < 2 {
        return Err(CoreError::invalid("PCC needs at least two spots"));
    }
    Ok((0..pred.ncols())
        .map(|j| pearson(pred.column(j), truth.column(j)))
        .collect())
}

fn check_shapes(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(CoreError::invalid(format!(
            "prediction shape {:?} does not match truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    Ok(())
}

/// Mean of the defined entries, `None` if there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut k) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        k += 1;
    }
    (k > 0).then(|| sum / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideMetrics {
    pub slide_id: String,
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub pcc: Vec<Option<f64>>,
}

impl SlideMetrics {
    /// Mean PCC over the defined genes of this slide.
    pub fn pcc_m(&self) -> Option<f64> {
        mean_defined(self.pcc.iter().copied())
    }

    /// Mean PCC over the defined genes among `genes`.
    pub fn pcc_over(&self, genes: &[usize]) -> Option<f64> {
        mean_defined(genes.iter().map(|&j| self.pcc[j]))
    }
}

/// MSE and MAE over all `n x m` entries, and the per-gene PCC.
pub fn slide_metrics(
    slide_id: &str,
    pred: &Array2<f64>,
    truth: &Array2<f64>,
) -> Result<SlideMetrics> {
    check_shapes(pred, truth)?;
    let diff = pred - truth;
    let count = diff.len() as f64;
    Ok(SlideMetrics {
        slide_id: slide_id.to_string(),
        n: pred.nrows(),
        mse: diff.iter().map(|d| d * d).sum::<f64>() / count,
        mae: diff.iter().map(|d| d.abs()).sum::<f64>() / count,
        pcc: pcc_per_gene(pred, truth)?,
    })
}

/// PCC(M) over `(prediction, truth)` pairs: per-slide mean over defined
/// genes, then mean over slides.
pub fn pcc_m_of_slides(pairs: &[(Array2<f64>, Array2<f64>)]) -> Result<Option<f64>> {
    let mut per_slide = Vec::with_capacity(pairs.len());
    for (p, t) in pairs {
        per_slide.push(mean_defined(pcc_per_gene(p, t)?));
    }
    Ok(mean_defined(per_slide))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub slides: Vec<SlideMetrics>,
    pub pcc_m: Option<f64>,
    pub pcc_h: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    /// Gene indices used for PCC(H).
    pub top_genes: Vec<usize>,
}

/// Unweighted means across slides. A slide's PCC(M) is its mean over
/// defined genes; PCC(H) restricts that mean to `top_genes`.
pub fn aggregate_metrics(slides: &[SlideMetrics], top_genes: &[usize]) -> Result<MetricsReport> {
    if slides.is_empty() {
        return Err(CoreError::invalid("no slides to aggregate"));
    }
    let m = slides[0].pcc.len();
    if slides.iter().any(|s| s.pcc.len() != m) {
        return Err(CoreError::invalid("slides report different gene counts"));
    }
    if let Some(&bad) = top_genes.iter().find(|&&j| j >= m) {
        return Err(CoreError::invalid(format!(
            "top gene index {bad} out of range"
        )));
    }
    let k = slides.len() as f64;
    Ok(MetricsReport {
        slides: slides.to_vec(),
        pcc_m: mean_defined(slides.iter().map(SlideMetrics::pcc_m)),
        pcc_h: mean_defined(slides.iter().map(|s| s.pcc_over(top_genes))),
        mse: slides.iter().map(|s| s.mse).sum::<f64>() / k,
        mae: slides.iter().map(|s| s.mae).sum::<f64>() / k,
        top_genes: top_genes.to_vec(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsReport {
    /// One row per slide plus an `ALL` row with the aggregates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slide_id,n,mse,mae,pcc_m,pcc_h\n");
        for r in &self.slides {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.slide_id,
                r.n,
                r.mse,
                r.mae,
                fmt_opt(r.pcc_m()),
                fmt_opt(r.pcc_over(&self.top_genes))
            );
        }
        let n: usize = self.slides.iter().map(|r| r.n).sum();
        let _ = writeln!(
            s,
            "ALL,{n},{},{},{},{}",
            self.mse,
            self.mae,
            fmt_opt(self.pcc_m),
            fmt_opt(self.pcc_h)
        );
        s
    }

    /// `key=value` lines: `pcc_m`, `pcc_h`, `mse`, `mae`.
    pub fn summary(&self) -> String {
        format!(
            "pcc_m={}\npcc_h={}\nmse={}\nmae={}\n",
            fmt_opt(self.pcc_m),
            fmt_opt(self.pcc_h),
            self.mse,
            self.mae
        )
    }

    /// Per-gene mean PCC over slides, one `gene,pcc` row per gene.
    pub fn gene_csv(&self, gene_names: &[String]) -> String {
        let mut s = String::from("gene,pcc\n");
        for (j, g) in gene_names.iter().enumerate() {
            let v = mean_defined(self.slides.iter().map(|r| r.pcc[j]));
            let _ = writeln!(s, "{g},{}", fmt_opt(v));
        }
        s
    }
}

/// Per-gene PCC of one fold, e.g. averaged over its test slides.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPcc {
    pub gene_names: Vec<String>,
    pub pcc: Vec<Option<f64>>,
}

impl FoldPcc {
    /// Mean over slides of each gene's defined PCC values.
    pub fn from_slides(gene_names: &[String], slides: &[SlideMetrics]) -> Self {
        let pcc = (0..gene_names.len())
            .map(|j| mean_defined(slides.iter().map(|s| s.pcc[j])))
            .collect();
        Self {
            gene_names: gene_names.to_vec(),
            pcc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneRanking {
    pub gene_names: Vec<String>,
    /// `ranks[f][j]`: 1-based rank of gene `j` in fold `f`.
    pub ranks: Vec<Vec<usize>>,
    pub average_rank: Vec<f64>,
    /// Indices of the `min(50, m)` genes with the lowest average rank.
    pub top: Vec<usize>,
}

/// Ranks genes by PCC within each fold (undefined last, ties by name),
/// then averages the ranks across folds.
pub fn rank_genes(folds: &[FoldPcc]) -> Result<GeneRanking> {
    let first = folds
        .first()
        .ok_or_else(|| CoreError::invalid("no folds to rank"))?;
    let names = &first.gene_names;
    let m = names.len();
    for (f, fold) in folds.iter().enumerate() {
        if &fold.gene_names != names || fold.pcc.len() != m {
            return Err(CoreError::invalid(format!(
                "fold {f} reports a different gene set"
            )));
        }
    }
    let mut ranks = Vec::with_capacity(folds.len());
    for fold in folds {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let key = |j: usize| fold.pcc[j].filter(|v| v.is_finite());
            match (key(a), key(b)) {
                (Some(x), Some(y)) => y.total_cmp(&x),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            }
            .then_with(|| names[a].cmp(&names[b]))
        });
        let mut r = vec![0; m];
        for (pos, &j) in order.iter().enumerate() {
            r[j] = pos + 1;
        }
        ranks.push(r);
    }
    let k = folds.len() as f64;
    let average_rank: Vec<f64> = (0..m)
        .map(|j| ranks.iter().map(|r| r[j] as f64).sum::<f64>() / k)
        .collect();
    let mut top: Vec<usize> = (0..m).collect();
    top.sort_by(|&a, &b| {
        average_rank[a]
            .total_cmp(&average_rank[b])
            .then_with(|| names[a].cmp(&names[b]))
    });
    top.truncate(TOP_GENES.min(m));
    Ok(GeneRanking {
        gene_names: names.clone(),
        ranks,
        average_rank,
        top,
    })
}

impl GeneRanking {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gene,average_rank,top\n");
        for (j, g) in self.gene_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "{g},{},{}",
                self.average_rank[j],
                u8::from(self.top.contains(&j))
            );
        }
        s
    }
}

/// Train/test assignment of one cross-validation fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Patient of every slide.
    pub patients: BTreeMap<String, String>,
}

fn patient_map(slides: &[(String, String)]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (slide, patient) in slides {
        if map.insert(slide.clone(), patient.clone()).is_some() {
            return Err(CoreError::invalid(format!("slide {slide} listed twice")));
        }
    }
    Ok(map)
}

fn patients_in_order(slides: &[(String, String)]) -> Vec<String> {
    let mut ids: Vec<String> = slides.iter().map(|(_, p)| p.clone()).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Builds folds whose test sets are the slides of each patient group.
/// Slide order within a fold follows the input order.
fn folds_from_groups(
    slides: &[(String, String)],
    groups: Vec<Vec<String>>,
) -> Result<Vec<FoldSpec>> {
    let patients = patient_map(slides)?;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(fold_id, group)| {
            let (test, train): (Vec<_>, Vec<_>) =
                slides.iter().partition(|(_, p)| group.contains(p));
            FoldSpec {
                fold_id,
                train: train.into_iter().map(|(s, _)| s.clone()).collect(),
                test: test.into_iter().map(|(s, _)| s.clone()).collect(),
                patients: patients.clone(),
            }
        })
        .collect())
}

/// One fold per patient (sorted by patient id), testing on all of that
/// patient's slides. `slides` holds `(slide_id, patient_id)` pairs.
pub fn make_lopcv_folds(slides: &[(String, String)]) -> Result<Vec<FoldSpec>> {
    let ids = patients_in_order(slides);
    if ids.len() < 2 {
        return Err(CoreError::Config(
            "leave-one-patient-out needs at least two patients".into(),
        ));
    }
    folds_from_groups(slides, ids.into_iter().map(|p| vec![p]).collect())
}

/// `k` folds of whole patients with balanced slide counts: patients are
/// taken largest first (equal sizes in seeded random order) and placed in
/// the fold with the fewest slides (lowest index on ties). Folds are then
/// ordered by their smallest patient id, so `k` equal to the patient count
/// gives exactly the leave-one-patient-out folds.
pub fn make_grouped_kfold(
    slides: &[(String, String)],
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSpec>> {
    let mut ids = patients_in_order(slides);
    if k < 2 {
        return Err(CoreError::Config(format!("k={k} must be at least 2")));
    }
    if k > ids.len() {
        return Err(CoreError::Config(format!(
            "k={k} exceeds the {} patients",
            ids.len()
        )));
    }
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for (_, p) in slides {
        *sizes.entry(p.as_str()).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.sort_by_key(|p| std::cmp::Reverse(sizes[p.as_str()]));
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut loads = vec![0usize; k];
    for p in ids {
        let f = (0..k).min_by_key(|&f| (loads[f], f)).expect("k >= 2");
        loads[f] += sizes[p.as_str()];
        groups[f].push(p);
    }
    for g in &mut groups {
        g.sort();
    }
    groups.sort_by(|a, b| a[0].cmp(&b[0]));
    folds_from_groups(slides, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pairs(spec: &[(&str, &str)]) -> Vec<(String, String)> {
        spec.iter()
            .map(|(s, p)| (s.to_string(), p.to_string()))
            .collect()
    }

    #[test]
    fn hand_metrics() {
        let pred = array![[0.0, 0.0], [1.0, 1.0]];
        let truth = array![[0.0, 1.0], [1.0, 0.0]];
        let m = slide_metrics("s", &pred, &truth).unwrap();
        assert_eq!(m.mse, 0.5);
        assert_eq!(m.mae, 0.5);
        let pcc: Vec<f64> = m.pcc.iter().map(|v| v.unwrap()).collect();
        assert!(
            (pcc[0] - 1.0).abs() < 1e-12 && (pcc[1] + 1.0).abs() < 1e-12,
            "{pcc:?}"
        );
    }

    #[test]
    fn shifted_predictions() {
        let truth = array![[0.0, 2.0], [1.0, 5.0], [3.0, -1.0]];
        let m = slide_metrics("s", &(&truth + 1.0), &truth).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        let neg = pcc_per_gene(&(truth.mapv(|v| 4.0 - v)), &truth).unwrap();
        for v in neg {
            assert!((v.unwrap() + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn too_few_spots_is_an_error() {
        assert!(pcc_per_gene(&array![[1.0]], &array![[1.0]]).is_err());
    }

    #[test]
    fn aggregates_are_slide_means() {
        let a = SlideMetrics {
            slide_id: "a".into(),
            n: 3,
            mse: 1.0,
            mae: 2.0,
            pcc: vec![Some(0.2), Some(0.2)],
        };
        let b = SlideMetrics {
            slide_id: "b".into(),
            n: 5,
            mse: 3.0,
            mae: 0.0,
            pcc: vec![Some(0.4), Some(0.4)],
        };
        let r = aggregate_metrics(&[a.clone(), b], &[0]).unwrap();
        assert!((r.pcc_m.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!((r.mse, r.mae), (2.0, 1.0));
        let one = aggregate_metrics(&[a.clone()], &[0, 1]).unwrap();
        assert_eq!(one.pcc_m, a.pcc_m());
        assert_eq!((one.mse, one.mae), (a.mse, a.mae));
        assert!(aggregate_metrics(&[], &[]).is_err());
    }

    #[test]
    fn all_undefined_is_reported_as_undefined() {
        let s = SlideMetrics {
            slide_id: "a".into(),
            n: 2,
            mse: 0.0,
            mae: 0.0,
            pcc: vec![None, None],
        };
        let r = aggregate_metrics(&[s.clone(), s], &[0]).unwrap();
        assert_eq!(r.pcc_m, None);
        assert_eq!(r.pcc_h, None);
        assert!(r.summary().contains("pcc_m=NA"));
    }

    fn fold(names: &[&str], pcc: &[Option<f64>]) -> FoldPcc {
        FoldPcc {
            gene_names: names.iter().map(|s| s.to_string()).collect(),
            pcc: pcc.to_vec(),
        }
    }

    #[test]
    fn ranking_hand_example() {
        let names = ["g1", "g2", "g3"];
        let r = rank_genes(&[
            fold(&names, &[Some(0.9), Some(0.5), Some(0.1)]),
            fold(&names, &[Some(0.8), Some(0.6), Some(0.2)]),
        ])
        .unwrap();
        assert_eq!(r.average_rank, vec![1.0, 2.0, 3.0]);
        assert_eq!(r.top, vec![0, 1, 2]);
    }

    #[test]
    fn ranking_ties_and_undefined() {
        let r = rank_genes(&[fold(&["b", "a", "c"], &[Some(0.5), Some(0.5), None])]).unwrap();
        assert_eq!(r.ranks[0], vec![2, 1, 3]);
        assert!(rank_genes(&[fold(&["a"], &[None]), fold(&["b"], &[None])]).is_err());
    }

    #[test]
    fn lopcv_folds_per_patient() {
        let s = pairs(&[("s1", "A"), ("s2", "A"), ("s3", "B"), ("s4", "C")]);
        let f = make_lopcv_folds(&s).unwrap();
        let sizes: Vec<usize> = f.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![2, 1, 1]);
        assert!(make_lopcv_folds(&pairs(&[("s1", "A"), ("s2", "A")])).is_err());
    }

    #[test]
    fn greedy_balancing_example() {
        let mut spec = Vec::new();
        for (p, count) in [("P1", 5), ("P2", 3), ("P3", 2), ("P4", 2)] {
            for i in 0..count {
                spec.push((format!("{p}-{i}"), p.to_string()));
            }
        }
        let f = make_grouped_kfold(&spec, 2, 1).unwrap();
        let mut loads: Vec<usize> = f.iter().map(|f| f.test.len()).collect();
        loads.sort();
        assert_eq!(loads, vec![5, 7]);
        assert!(make_grouped_kfold(&spec, 5, 1).is_err());
    }

    #[test]
    fn kfold_with_k_patients_is_lopcv() {
        let s = pairs(&[
            ("s1", "B"),
            ("s2", "A"),
            ("s3", "B"),
            ("s4", "C"),
            ("s5", "A"),
        ]);
        assert_eq!(
            make_grouped_kfold(&s, 3, 99).unwrap(),
            make_lopcv_folds(&s).unwrap()
        );
    }
}
