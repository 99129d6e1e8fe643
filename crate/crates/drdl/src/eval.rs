//! Retrieval evaluation: L2 distances, ranked galleries, CMC and mAP.
//!
//! A ranking sorts the gallery by ascending distance with ties broken by
//! gallery index, so results are deterministic. Before any metric is
//! computed, junk items are removed: gallery entries sharing BOTH the
//! query's person and camera (the standard single-shot protocol), plus
//! everything unlabeled. Junk removal never reorders what remains.
//! Queries with no relevant gallery item left are excluded from every
//! metric denominator.
//!
//! `reference` holds a deliberately slow, direct recomputation of both
//! metrics; the fast implementations must agree with it exactly and the
//! test suites hold them to that.

use crate::data::Dataset;
use crate::model::DrdlModel;
use crate::nn::Phase;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Content encoder output, average and max pooling summed: the
    /// retrieval feature.
    ContentFused,
    /// Style encoder output: retrieval through it should collapse to
    /// chance once the model is trained.
    Style,
}

impl FeatureSource {
    pub fn label(self) -> &'static str {
        match self {
            FeatureSource::ContentFused => "content-fused",
            FeatureSource::Style => "style",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub feature: FeatureSource,
    /// Exclude gallery items sharing both person and camera with the
    /// query. On by default; synthetic experiments may disable it.
    pub junk_rule: bool,
    /// Exclude the gallery item with the query's own filename, for
    /// protocols where the query set is embedded in the gallery.
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            feature: FeatureSource::ContentFused,
            junk_rule: true,
            exclude_self: false,
        }
    }
}

/// Identity of one query or gallery item, as the metrics see it.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemInfo {
    pub person_id: Option<u32>,
    pub camera_id: usize,
    pub name: String,
}

pub fn item_info(ds: &Dataset) -> Vec<ItemInfo> {
    ds.samples
        .iter()
        .map(|s| ItemInfo {
            person_id: s.person_id,
            camera_id: s.camera_id,
            name: s.filename.clone(),
        })
        .collect()
}

/// One query's view of the gallery.
#[derive(Clone, Debug)]
pub struct Ranking {
    /// Gallery indices by ascending distance, ties by index.
    pub order: Vec<usize>,
    /// Indexed by gallery position: shares the query's person id.
    pub relevant: Vec<bool>,
    /// Indexed by gallery position: excluded before metrics.
    pub junk: Vec<bool>,
}

impl Ranking {
    /// The ranked list with junk dropped; relative order is preserved.
    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().copied().filter(|&j| !self.junk[j])
    }

    pub fn kept_len(&self) -> usize {
        self.kept().count()
    }

    pub fn relevant_kept(&self) -> usize {
        self.kept().filter(|&j| self.relevant[j]).count()
    }

    /// 1-based rank of the first relevant kept item, if any.
    pub fn first_relevant_rank(&self) -> Option<usize> {
        self.kept()
            .position(|j| self.relevant[j])
            .map(|pos| pos + 1)
    }

    /// Mean over relevant kept items of precision at their ranks.
    /// `None` when the query has nothing relevant to find.
    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut precision_sum = 0.0f64;
        for (pos, j) in self.kept().enumerate() {
            if self.relevant[j] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
            }
        }
        (hits > 0).then(|| precision_sum / hits as f64)
    }
}

/// Entry (i, j) is the L2 distance between query i and gallery j.
pub fn distance_matrix(query: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = query
        .first()
        .or_else(|| gallery.first())
        .map(|v| v.len())
        .unwrap_or(0);
    for v in query.iter().chain(gallery) {
        if v.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "distance matrix features".into(),
                expected: vec![dim],
                got: vec![v.len()],
            });
        }
    }
    Ok(query
        .iter()
        .map(|q| {
            gallery
                .iter()
                .map(|g| {
                    q.iter()
                        .zip(g)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

/// Builds every query's ranking over the gallery.
pub fn rank_queries(
    dists: &[Vec<f64>],
    queries: &[ItemInfo],
    gallery: &[ItemInfo],
    opts: &EvalOptions,
) -> Result<Vec<Ranking>> {
    if dists.len() != queries.len() {
        return Err(Error::ShapeMismatch {
            context: "distance rows vs queries".into(),
            expected: vec![queries.len()],
            got: vec![dists.len()],
        });
    }
    queries
        .iter()
        .zip(dists)
        .map(|(q, row)| {
            if row.len() != gallery.len() {
                return Err(Error::ShapeMismatch {
                    context: "distance row vs gallery".into(),
                    expected: vec![gallery.len()],
                    got: vec![row.len()],
                });
            }
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            order.sort_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .expect("finite distances")
                    .then(a.cmp(&b))
            });
            let relevant = gallery
                .iter()
                .map(|g| q.person_id.is_some() && g.person_id == q.person_id)
                .collect();
            let junk = gallery
                .iter()
                .map(|g| {
                    g.person_id.is_none()
                        || (opts.junk_rule
                            && g.person_id == q.person_id
                            && q.person_id.is_some()
                            && g.camera_id == q.camera_id)
                        || (opts.exclude_self && g.name == q.name)
                })
                .collect();
            Ok(Ranking {
                order,
                relevant,
                junk,
            })
        })
        .collect()
}

fn scored(rankings: &[Ranking]) -> impl Iterator<Item = &Ranking> {
    rankings.iter().filter(|r| r.relevant_kept() > 0)
}

/// CMC(k) for k in 1..=max_k: the fraction of scored queries whose first
/// relevant kept item appears at rank <= k.
pub fn cmc(rankings: &[Ranking], max_k: usize) -> Result<Vec<f64>> {
    let ranks: Vec<usize> = scored(rankings)
        .map(|r| r.first_relevant_rank().expect("scored queries have one"))
        .collect();
    if ranks.is_empty() {
        return Err(Error::InvalidInput(
            "no query has a relevant gallery item; metrics undefined".into(),
        ));
    }
    Ok((1..=max_k)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect())
}

/// Average precision per scored query, in query order.
pub fn average_precisions(rankings: &[Ranking]) -> Vec<f64> {
    scored(rankings)
        .map(|r| r.average_precision().expect("scored queries have one"))
        .collect()
}

pub fn mean_ap(rankings: &[Ranking]) -> Result<f64> {
    let aps = average_precisions(rankings);
    if aps.is_empty() {
        return Err(Error::InvalidInput(
            "no query has a relevant gallery item; metrics undefined".into(),
        ));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub feature: FeatureSource,
    /// CMC at every k up to the gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    /// Mean relevant fraction of the kept gallery over scored queries:
    /// the rank-1 accuracy of guessing blind.
    pub chance: f64,
    pub queries_scored: usize,
    pub gallery_size: usize,
}

impl EvalReport {
    /// CMC at rank k; saturates at the end of the curve.
    pub fn rank(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.cmc.len());
        self.cmc[k - 1]
    }

    pub fn csv(&self) -> String {
        format!(
            "feature,rank1,rank5,rank10,map,chance,queries_scored,gallery_size\n{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            self.feature.label(),
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map,
            self.chance,
            self.queries_scored,
            self.gallery_size,
        )
    }
}

/// Builds the report from precomputed rankings.
pub fn report_from_rankings(
    rankings: &[Ranking],
    feature: FeatureSource,
    gallery_size: usize,
) -> Result<EvalReport> {
    let curve = cmc(rankings, gallery_size.max(1))?;
    let per_query_ap = average_precisions(rankings);
    let map = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    let chances: Vec<f64> = scored(rankings)
        .map(|r| r.relevant_kept() as f64 / r.kept_len() as f64)
        .collect();
    Ok(EvalReport {
        feature,
        map,
        chance: chances.iter().sum::<f64>() / chances.len() as f64,
        queries_scored: per_query_ap.len(),
        per_query_ap,
        cmc: curve,
        gallery_size,
    })
}

/// Extracts one feature vector per sample in eval phase. Chunked forward
/// passes keep memory flat; eval statistics make the result independent
/// of the chunking.
pub fn extract_features<T: Scalar>(
    model: &mut DrdlModel<T>,
    ds: &Dataset,
    source: FeatureSource,
    chunk: usize,
) -> Result<Vec<Vec<f64>>> {
    let chunk = chunk.max(1);
    let mut feats = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for group in indices.chunks(chunk) {
        let images: Tensor<T> = crate::data::stack_images(ds, group);
        let pooled = match source {
            FeatureSource::ContentFused => {
                model.forward_content(&images, Phase::Eval)?.0.fused
            }
            FeatureSource::Style => model.forward_style(&images, Phase::Eval)?.0,
        };
        let dim = pooled.shape()[1];
        for row in 0..group.len() {
            feats.push(
                pooled.data()[row * dim..(row + 1) * dim]
                    .iter()
                    .map(|&v| Scalar::to_f64(v))
                    .collect(),
            );
        }
    }
    Ok(feats)
}

/// Full retrieval evaluation of `model` on a query and gallery split.
pub fn evaluate<T: Scalar>(
    model: &mut DrdlModel<T>,
    query: &Dataset,
    gallery: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let qf = extract_features(model, query, opts.feature, 32)?;
    let gf = extract_features(model, gallery, opts.feature, 32)?;
    let dists = distance_matrix(&qf, &gf)?;
    let rankings = rank_queries(&dists, &item_info(query), &item_info(gallery), opts)?;
    report_from_rankings(&rankings, opts.feature, gallery.len())
}

/// Carves a dataset into (query, gallery): per (person, camera) group the
/// lowest sequence number is the query, the rest is gallery. Unlabeled
/// samples all go to the gallery (they can only ever be junk).
pub fn split_query_gallery(ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    let mut best: BTreeMap<(u32, usize), (u32, usize)> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let Some(pid) = s.person_id else { continue };
        let seq = crate::data::parse_filename(&s.filename)
            .map(|(_, _, seq)| seq)
            .unwrap_or(u32::MAX);
        let entry = best.entry((pid, s.camera_id)).or_insert((seq, i));
        if seq < entry.0 {
            *entry = (seq, i);
        }
    }
    let chosen: std::collections::BTreeSet<usize> = best.values().map(|&(_, i)| i).collect();
    let query: Vec<usize> = (0..ds.len()).filter(|i| chosen.contains(i)).collect();
    let gallery: Vec<usize> = (0..ds.len()).filter(|i| !chosen.contains(i)).collect();
    (query, gallery)
}

/// Clones the chosen samples into a standalone dataset.
pub fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    let mut out = Dataset {
        meta: ds.meta.clone(),
        domain: ds.domain,
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        id_classes: Vec::new(),
    };
    out.rebuild_id_classes();
    out
}

/// Direct recomputations of both metrics, kept naive on purpose: the fast
/// paths are verified against these on random instances.
pub mod reference {
    use super::{EvalOptions, ItemInfo};

    /// (CMC curve up to max_k, mAP), enumerated from scratch per k.
    pub fn cmc_and_map(
        dists: &[Vec<f64>],
        queries: &[ItemInfo],
        gallery: &[ItemInfo],
        opts: &EvalOptions,
        max_k: usize,
    ) -> Option<(Vec<f64>, f64)> {
        let mut kept_lists: Vec<Vec<usize>> = Vec::new();
        let mut relevant_sets: Vec<Vec<bool>> = Vec::new();
        for (q, row) in queries.iter().zip(dists) {
            let mut idx: Vec<usize> = (0..gallery.len()).collect();
            idx.sort_by(|&a, &b| match row[a].partial_cmp(&row[b]).unwrap() {
                std::cmp::Ordering::Equal => a.cmp(&b),
                other => other,
            });
            let keep = |j: usize| {
                let g = &gallery[j];
                if g.person_id.is_none() {
                    return false;
                }
                if opts.exclude_self && g.name == q.name {
                    return false;
                }
                !(opts.junk_rule
                    && q.person_id.is_some()
                    && g.person_id == q.person_id
                    && g.camera_id == q.camera_id)
            };
            let kept: Vec<usize> = idx.into_iter().filter(|&j| keep(j)).collect();
            let relevant: Vec<bool> = kept
                .iter()
                .map(|&j| q.person_id.is_some() && gallery[j].person_id == q.person_id)
                .collect();
            if relevant.iter().any(|&r| r) {
                kept_lists.push(kept);
                relevant_sets.push(relevant);
            }
        }
        if kept_lists.is_empty() {
            return None;
        }
        let q_count = kept_lists.len() as f64;

        let mut curve = Vec::with_capacity(max_k);
        for k in 1..=max_k {
            let mut hits = 0usize;
            for rel in &relevant_sets {
                if rel.iter().take(k).any(|&r| r) {
                    hits += 1;
                }
            }
            curve.push(hits as f64 / q_count);
        }

        let mut ap_sum = 0.0;
        for rel in &relevant_sets {
            let total_rel = rel.iter().filter(|&&r| r).count();
            let mut seen = 0usize;
            let mut ap = 0.0;
            for (pos, &r) in rel.iter().enumerate() {
                if r {
                    seen += 1;
                    ap += seen as f64 / (pos + 1) as f64;
                }
            }
            ap_sum += ap / total_rel as f64;
        }
        Some((curve, ap_sum / q_count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, LabelSpaces};
    use crate::model::ModelConfig;
    use crate::synth::{generate, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn info(pid: i64, cam: usize, name: &str) -> ItemInfo {
        ItemInfo {
            person_id: (pid >= 0).then_some(pid as u32),
            camera_id: cam,
            name: name.into(),
        }
    }

    #[test]
    fn distances_match_scalar_geometry() {
        let d = distance_matrix(&[vec![0.0, 0.0]], &[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(d[0][0], 5.0);
        assert_eq!(d[0][1], 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let g: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let d = distance_matrix(&q, &g).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let direct = (0..3)
                    .map(|k| (q[i][k] - g[j][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_eq!(d[i][j], direct);
            }
        }

        assert!(distance_matrix(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn hand_checked_ap_and_cmc_cases() {
        // Relevant at kept ranks 1 and 3 of a 4-item gallery.
        let r = Ranking {
            order: vec![0, 1, 2, 3],
            relevant: vec![true, false, true, false],
            junk: vec![false; 4],
        };
        let ap = r.average_precision().unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(format!("{ap:.6}"), "0.833333");

        // First relevant at rank 3: CMC = 0, 0, 1, 1.
        let r = Ranking {
            order: vec![0, 1, 2, 3],
            relevant: vec![false, false, true, false],
            junk: vec![false; 4],
        };
        assert_eq!(r.first_relevant_rank(), Some(3));
        let curve = cmc(&[r], 4).unwrap();
        assert_eq!(curve, vec![0.0, 0.0, 1.0, 1.0]);

        // All relevant ranked first.
        let r = Ranking {
            order: vec![1, 0, 2],
            relevant: vec![true, true, false],
            junk: vec![false; 3],
        };
        assert_eq!(r.average_precision(), Some(1.0));
        assert_eq!(cmc(&[r], 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn junk_removal_preserves_relative_order() {
        let dists = vec![vec![0.4, 0.1, 0.3, 0.2, 0.5]];
        let queries = vec![info(1, 0, "q")];
        let gallery = vec![
            info(1, 0, "a"), // junk: same pid and camera
            info(2, 1, "b"),
            info(1, 1, "c"),
            info(-1, 2, "d"), // junk: unlabeled
            info(1, 2, "e"),
        ];
        let r = &rank_queries(&dists, &queries, &gallery, &EvalOptions::default()).unwrap()[0];
        assert_eq!(r.order, vec![1, 3, 2, 0, 4]);
        let kept: Vec<usize> = r.kept().collect();
        assert_eq!(kept, vec![1, 2, 4]);
        // Order among survivors is untouched by the removal.
        let positions: Vec<usize> = kept
            .iter()
            .map(|&j| r.order.iter().position(|&o| o == j).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(r.first_relevant_rank(), Some(2));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let dists = vec![vec![0.7, 0.7, 0.7]];
        let queries = vec![info(3, 0, "q")];
        let gallery = vec![info(9, 1, "a"), info(3, 1, "b"), info(3, 2, "c")];
        let r = &rank_queries(&dists, &queries, &gallery, &EvalOptions::default()).unwrap()[0];
        assert_eq!(r.order, vec![0, 1, 2]);
        assert_eq!(r.first_relevant_rank(), Some(2));
    }

    #[test]
    fn queries_without_relevant_items_are_excluded() {
        let dists = vec![vec![0.1, 0.2], vec![0.2, 0.1]];
        let queries = vec![info(1, 0, "q0"), info(7, 0, "q1")]; // pid 7 absent
        let gallery = vec![info(1, 1, "a"), info(2, 1, "b")];
        let rankings = rank_queries(&dists, &queries, &gallery, &EvalOptions::default()).unwrap();
        let curve = cmc(&rankings, 2).unwrap();
        assert_eq!(curve, vec![1.0, 1.0]); // only q0 counts
        assert_eq!(average_precisions(&rankings).len(), 1);
        assert!((mean_ap(&rankings).unwrap() - 1.0).abs() < 1e-15);

        // Every query scoreless: metrics are refused, not faked.
        let rankings =
            rank_queries(&dists, &[info(7, 0, "q"), info(8, 0, "r")], &gallery, &EvalOptions::default())
                .unwrap();
        assert!(cmc(&rankings, 2).is_err());
        assert!(mean_ap(&rankings).is_err());
    }

    #[test]
    fn streaming_metrics_equal_the_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..60 {
            let nq = rng.gen_range(1..12);
            let ng = rng.gen_range(2..40);
            let dim = rng.gen_range(1..5);
            let qf: Vec<Vec<f64>> = (0..nq)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let gf: Vec<Vec<f64>> = (0..ng)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mk = |i: usize, r: &mut ChaCha8Rng| {
                info(
                    if r.gen_bool(0.1) { -1 } else { r.gen_range(0..5) },
                    r.gen_range(0..3),
                    &format!("n{i}"),
                )
            };
            let queries: Vec<ItemInfo> = (0..nq).map(|i| mk(i, &mut rng)).collect();
            let gallery: Vec<ItemInfo> = (0..ng).map(|i| mk(i + 100, &mut rng)).collect();
            let opts = EvalOptions {
                feature: FeatureSource::ContentFused,
                junk_rule: rng.gen_bool(0.5),
                exclude_self: false,
            };
            let dists = distance_matrix(&qf, &gf).unwrap();
            let rankings = rank_queries(&dists, &queries, &gallery, &opts).unwrap();
            let fast_curve = cmc(&rankings, ng);
            let oracle = reference::cmc_and_map(&dists, &queries, &gallery, &opts, ng);
            match oracle {
                None => assert!(fast_curve.is_err(), "case {case}: oracle undefined"),
                Some((ref_curve, ref_map)) => {
                    let fast_curve = fast_curve.unwrap();
                    let fast_map = mean_ap(&rankings).unwrap();
                    for (k, (a, b)) in fast_curve.iter().zip(&ref_curve).enumerate() {
                        assert!(
                            (a - b).abs() < 1e-12,
                            "case {case} k={} fast {a} ref {b}",
                            k + 1
                        );
                    }
                    assert!((fast_map - ref_map).abs() < 1e-12, "case {case} map");
                }
            }
        }
    }

    #[test]
    fn metrics_are_isometry_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dim = 4;
        let qf: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gf: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let queries: Vec<ItemInfo> = (0..12)
            .map(|i| info(i % 5, (i % 3) as usize, &format!("q{i}")))
            .collect();
        let gallery: Vec<ItemInfo> = (0..30)
            .map(|i| info((i % 6) as i64, (i % 3) as usize, &format!("g{i}")))
            .collect();

        // Random rotation by Gram-Schmidt plus a translation.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
            let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for vi in &mut v {
                    *vi /= norm;
                }
                basis.push(v);
            }
        }
        let shift: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    (0..dim)
                        .map(|k| {
                            shift[k]
                                + basis[k].iter().zip(r).map(|(b, x)| b * x).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };

        let opts = EvalOptions::default();
        let d0 = distance_matrix(&qf, &gf).unwrap();
        let r0 = rank_queries(&d0, &queries, &gallery, &opts).unwrap();
        let d1 = distance_matrix(&apply(&qf), &apply(&gf)).unwrap();
        let r1 = rank_queries(&d1, &queries, &gallery, &opts).unwrap();
        assert_eq!(cmc(&r0, 30).unwrap(), cmc(&r1, 30).unwrap());
        assert_eq!(mean_ap(&r0).unwrap(), mean_ap(&r1).unwrap());
    }

    #[test]
    fn duplicate_gallery_with_self_exclusion_ranks_first() {
        // Gallery = query set; each query's twin (same person, other index)
        // is its nearest non-self neighbor.
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i / 2) as f64 * 10.0 + (i % 2) as f64 * 0.01, 0.0])
            .collect();
        let items: Vec<ItemInfo> = (0..6)
            .map(|i| info((i / 2) as i64, i % 2, &format!("f{i}")))
            .collect();
        let opts = EvalOptions {
            feature: FeatureSource::ContentFused,
            junk_rule: false,
            exclude_self: true,
        };
        let dists = distance_matrix(&feats, &feats).unwrap();
        let rankings = rank_queries(&dists, &items, &items, &opts).unwrap();
        let report = report_from_rankings(&rankings, opts.feature, 6).unwrap();
        assert_eq!(report.rank(1), 1.0);
        assert_eq!(report.queries_scored, 6);
        // Self is really excluded: kept lists have 5 entries.
        assert!(rankings.iter().all(|r| r.kept_len() == 5));
    }

    #[test]
    fn rank_k_saturates_and_is_monotone() {
        let r = Ranking {
            order: vec![0, 1],
            relevant: vec![false, true],
            junk: vec![false, false],
        };
        let report = report_from_rankings(&[r], FeatureSource::Style, 2).unwrap();
        assert_eq!(report.rank(1), 0.0);
        assert_eq!(report.rank(5), 1.0); // saturated beyond the gallery
        assert_eq!(report.rank(10), 1.0);
        assert!(report.cmc.windows(2).all(|w| w[0] <= w[1]));
        let csv = report.csv();
        assert!(csv.starts_with("feature,rank1,rank5,rank10,map,chance"));
        assert!(csv.contains("style,"));
    }

    #[test]
    fn untrained_model_scores_near_chance_on_the_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            ids_per_domain: 12,
            cams_per_domain: 3,
            images_per_id_cam: 2,
            eval_images_per_id_cam: 3,
            ..SynthConfig::default()
        };
        let bench = generate(&cfg, dir.path()).unwrap();
        let eval_ds = bench.target_eval.unwrap();
        let (q_idx, g_idx) = split_query_gallery(&eval_ds);
        let query = subset(&eval_ds, &q_idx);
        let gallery = subset(&eval_ds, &g_idx);

        let labels = LabelSpaces {
            num_source_ids: 12,
            num_source_cams: 3,
            num_target_cams: 3,
        };
        let mut model = DrdlModel::<f32>::new(ModelConfig::default(), labels, 99).unwrap();
        let report = evaluate(&mut model, &query, &gallery, &EvalOptions::default()).unwrap();
        assert!(report.queries_scored > 0);
        assert!(report.chance > 0.0 && report.chance < 0.2);
        assert!(
            report.rank(1) <= report.chance + 0.2,
            "untrained rank1 {} vs chance {}",
            report.rank(1),
            report.chance
        );
        assert!(report.map <= 0.35);
    }

    #[test]
    fn feature_extraction_is_chunking_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            ids_per_domain: 4,
            cams_per_domain: 2,
            images_per_id_cam: 2,
            eval_images_per_id_cam: 0,
            ..SynthConfig::default()
        };
        let bench = generate(&cfg, dir.path()).unwrap();
        let labels = LabelSpaces {
            num_source_ids: 4,
            num_source_cams: 2,
            num_target_cams: 2,
        };
        let mut model = DrdlModel::<f32>::new(ModelConfig::default(), labels, 3).unwrap();
        let a = extract_features(&mut model, &bench.source, FeatureSource::ContentFused, 32)
            .unwrap();
        let b = extract_features(&mut model, &bench.source, FeatureSource::ContentFused, 5)
            .unwrap();
        assert_eq!(a, b);
        let s = extract_features(&mut model, &bench.source, FeatureSource::Style, 7).unwrap();
        assert_eq!(s.len(), bench.source.len());
        assert_ne!(a, s);
    }

    #[test]
    fn query_gallery_split_takes_lowest_sequence_per_group() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            ids_per_domain: 3,
            cams_per_domain: 2,
            images_per_id_cam: 1,
            eval_images_per_id_cam: 3,
            ..SynthConfig::default()
        };
        let bench = generate(&cfg, dir.path()).unwrap();
        let eval_ds = bench.target_eval.unwrap();
        let (q, g) = split_query_gallery(&eval_ds);
        assert_eq!(q.len(), 3 * 2);
        assert_eq!(g.len(), 3 * 2 * 2);
        for &i in &q {
            let (_, _, seq) = crate::data::parse_filename(&eval_ds.samples[i].filename).unwrap();
            assert_eq!(seq, 1, "train split used seq 0 only, eval starts at 1");
        }
        let query = subset(&eval_ds, &q);
        assert_eq!(query.domain, Domain::Target);
        assert_eq!(query.id_classes.len(), 3);
    }
}
