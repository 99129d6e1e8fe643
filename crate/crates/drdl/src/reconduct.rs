//! Dataset re-conduction: thins a labeled dataset over a camera adjacency
//! graph so that a controlled fraction of identities keep images in one
//! camera only.
//!
//! Every identity gets a home camera (the one holding most of its images,
//! ties to the lowest index). For each graph edge at the home camera, an
//! independent coin with the configured probability decides whether the
//! identity also retains its images from that neighbor. Images from all
//! other cameras are dropped. Nothing is created or relabeled, so the
//! output is always a sub-multiset of the input.
//!
//! Each identity draws from its own derived stream, and it draws one coin
//! per incident edge regardless of the probability value. Two runs on the
//! same seed therefore see identical coins, which makes retention
//! monotone in the probability: raising it can only turn drops into
//! keeps, never the reverse.

use crate::data::Dataset;
use crate::util::derive_seed;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Seed-derivation tag for per-identity coin streams.
const TAG_IDENTITY: u64 = 0xEC;

/// Undirected camera adjacency. Edges are stored normalized (low index
/// first) and deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraGraph {
    num_cameras: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl CameraGraph {
    pub fn new(num_cameras: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_cameras == 0 {
            return Err(Error::Config("a camera graph needs at least one camera".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Config(format!("self-loop on camera {a}")));
            }
            if a >= num_cameras || b >= num_cameras {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) exceeds camera range 0..{num_cameras}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(CameraGraph {
            num_cameras,
            edges: set,
        })
    }

    /// Path graph: camera i linked to i+1.
    pub fn line(num_cameras: usize) -> Result<Self> {
        let edges: Vec<(usize, usize)> = (1..num_cameras).map(|i| (i - 1, i)).collect();
        CameraGraph::new(num_cameras, &edges)
    }

    /// Every pair of cameras linked.
    pub fn complete(num_cameras: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for a in 0..num_cameras {
            for b in a + 1..num_cameras {
                edges.push((a, b));
            }
        }
        CameraGraph::new(num_cameras, &edges)
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Cameras adjacent to `cam`, ascending. The order is part of the
    /// sampling contract: coins are drawn in exactly this order.
    pub fn neighbors(&self, cam: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == cam {
                    Some(b)
                } else if b == cam {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ReconductConfig {
    pub graph: CameraGraph,
    /// Chance that an identity keeps its images from a camera adjacent to
    /// its home camera.
    pub move_probability: f64,
    pub seed: u64,
}

impl ReconductConfig {
    pub fn new(graph: CameraGraph) -> Self {
        ReconductConfig {
            graph,
            move_probability: 0.25,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.move_probability) || !self.move_probability.is_finite() {
            return Err(Error::Config(format!(
                "move_probability must lie in [0, 1], got {}",
                self.move_probability
            )));
        }
        Ok(())
    }
}

/// Coin tallies for one graph edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeStat {
    /// Identities whose home camera touches this edge.
    pub trials: usize,
    /// Trials whose coin fired, keeping the neighbor's images.
    pub retained: usize,
}

#[derive(Clone, Debug)]
pub struct ReconductStats {
    pub identities_in: usize,
    pub identities_kept: usize,
    pub images_in: usize,
    pub images_kept: usize,
    /// Fraction of kept identities whose images sit in a single camera.
    pub single_camera_fraction: f64,
    pub edge_stats: BTreeMap<(usize, usize), EdgeStat>,
}

/// Applies the re-conduction rule. The output dataset shares the input's
/// name and image geometry; its identity count is re-declared to match
/// the surviving samples so it can be saved and reloaded as-is.
pub fn reconduct(ds: &Dataset, cfg: &ReconductConfig) -> Result<(Dataset, ReconductStats)> {
    cfg.validate()?;
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let Some(pid) = s.person_id else {
            return Err(Error::InvalidInput(format!(
                "re-conduction needs identity labels; {} has none",
                s.filename
            )));
        };
        if s.camera_local >= cfg.graph.num_cameras() {
            return Err(Error::ClassOutOfRange {
                index: s.camera_local,
                width: cfg.graph.num_cameras(),
                context: format!("camera of {} vs the given graph", s.filename),
            });
        }
        by_identity.entry(pid).or_default().push(i);
    }

    let mut edge_stats: BTreeMap<(usize, usize), EdgeStat> = BTreeMap::new();
    let mut kept_indices: Vec<usize> = Vec::new();
    let mut identities_kept = 0usize;
    let mut single_camera = 0usize;
    for (&pid, indices) in &by_identity {
        let mut counts = vec![0usize; cfg.graph.num_cameras()];
        for &i in indices {
            counts[ds.samples[i].camera_local] += 1;
        }
        let home = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(cam, _)| cam)
            .expect("graph holds at least one camera");

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_IDENTITY, pid as u64]));
        let mut retained: BTreeSet<usize> = BTreeSet::new();
        retained.insert(home);
        for neighbor in cfg.graph.neighbors(home) {
            let coin: f64 = rng.gen();
            let edge = (home.min(neighbor), home.max(neighbor));
            let stat = edge_stats.entry(edge).or_default();
            stat.trials += 1;
            if coin < cfg.move_probability {
                stat.retained += 1;
                retained.insert(neighbor);
            }
        }

        let kept: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| retained.contains(&ds.samples[i].camera_local))
            .collect();
        if kept.is_empty() {
            continue;
        }
        let cams_present: BTreeSet<usize> =
            kept.iter().map(|&i| ds.samples[i].camera_local).collect();
        if cams_present.len() == 1 {
            single_camera += 1;
        }
        identities_kept += 1;
        kept_indices.extend(kept);
    }
    kept_indices.sort_unstable();

    let mut out = Dataset {
        meta: ds.meta.clone(),
        domain: ds.domain,
        samples: kept_indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        id_classes: Vec::new(),
    };
    out.rebuild_id_classes();
    out.meta.num_ids = out.id_classes.len();

    let stats = ReconductStats {
        identities_in: by_identity.len(),
        identities_kept,
        images_in: ds.samples.len(),
        images_kept: out.samples.len(),
        single_camera_fraction: if identities_kept == 0 {
            0.0
        } else {
            single_camera as f64 / identities_kept as f64
        },
        edge_stats,
    };
    Ok((out, stats))
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRow {
    pub ids: usize,
    pub images: usize,
    /// Cameras actually holding images, not the declared label space.
    pub cameras: usize,
    pub single_camera_fraction: f64,
}

pub fn summarize(ds: &Dataset) -> DatasetRow {
    let mut by_identity: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    let mut cameras: BTreeSet<usize> = BTreeSet::new();
    for s in &ds.samples {
        cameras.insert(s.camera_local);
        if let Some(pid) = s.person_id {
            by_identity.entry(pid).or_default().insert(s.camera_local);
        }
    }
    let single = by_identity.values().filter(|cams| cams.len() == 1).count();
    DatasetRow {
        ids: by_identity.len(),
        images: ds.samples.len(),
        cameras: cameras.len(),
        single_camera_fraction: if by_identity.is_empty() {
            0.0
        } else {
            single as f64 / by_identity.len() as f64
        },
    }
}

pub const STATS_HEADER: &str = "dataset,ids,images,cameras,single_camera_fraction";

pub fn stats_csv(rows: &[(String, DatasetRow)]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{:.6}\n",
            r.ids, r.images, r.cameras, r.single_camera_fraction
        ));
    }
    out
}

/// The same table as [`stats_csv`], space-aligned for terminals.
pub fn stats_text(rows: &[(String, DatasetRow)]) -> String {
    let mut cells: Vec<[String; 5]> = vec![STATS_HEADER.split(',').map(String::from).collect::<Vec<_>>().try_into().expect("five columns")];
    for (name, r) in rows {
        cells.push([
            name.clone(),
            r.ids.to_string(),
            r.images.to_string(),
            r.cameras.to_string(),
            format!("{:.4}", r.single_camera_fraction),
        ]);
    }
    let widths: Vec<usize> = (0..5)
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetMeta, Domain, Sample};
    use crate::tensor::Tensor;

    /// Label-only dataset: reconduction never looks at pixels.
    fn toy_dataset(ids: usize, cams: usize, images_per_id_cam: usize) -> Dataset {
        let mut samples = Vec::new();
        for pid in 0..ids {
            for cam in 0..cams {
                for seq in 0..images_per_id_cam {
                    samples.push(Sample {
                        image: Tensor::zeros(&[1, 2, 2]),
                        person_id: Some(pid as u32),
                        camera_local: cam,
                        camera_id: cam,
                        domain: Domain::Source,
                        filename: format!("{pid:04}_c{}_{seq:04}.png", cam + 1),
                    });
                }
            }
        }
        let mut ds = Dataset {
            meta: DatasetMeta {
                name: "toy".into(),
                channels: 1,
                height: 2,
                width: 2,
                num_ids: ids,
                num_cams: cams,
            },
            domain: Domain::Source,
            samples,
            id_classes: Vec::new(),
        };
        ds.rebuild_id_classes();
        ds
    }

    #[test]
    fn graph_construction_normalizes_and_validates() {
        assert!(CameraGraph::new(3, &[(0, 0)]).is_err());
        assert!(CameraGraph::new(3, &[(0, 3)]).is_err());
        assert!(CameraGraph::new(0, &[]).is_err());
        let g = CameraGraph::new(3, &[(2, 0), (0, 2), (1, 2)]).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(0, 2), (1, 2)]);
        assert_eq!(g.neighbors(2), vec![0, 1]);
        assert_eq!(g.neighbors(0), vec![2]);

        let line = CameraGraph::line(3).unwrap();
        assert_eq!(line.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        let complete = CameraGraph::complete(4).unwrap();
        assert_eq!(complete.edges().count(), 6);
        let lonely = CameraGraph::line(1).unwrap();
        assert_eq!(lonely.edges().count(), 0);
    }

    #[test]
    fn zero_probability_collapses_every_identity_to_one_camera() {
        let ds = toy_dataset(32, 3, 2);
        let mut cfg = ReconductConfig::new(CameraGraph::line(3).unwrap());
        cfg.move_probability = 0.0;
        let (out, stats) = reconduct(&ds, &cfg).unwrap();
        assert_eq!(stats.single_camera_fraction, 1.0);
        assert!(stats.identities_kept <= 32);
        assert_eq!(out.id_classes.len(), stats.identities_kept);
        assert_eq!(out.meta.num_ids, stats.identities_kept);
        // Each identity keeps exactly its home camera's two images.
        assert_eq!(out.samples.len(), 32 * 2);
        assert!(stats.images_kept < stats.images_in);
        for stat in stats.edge_stats.values() {
            assert_eq!(stat.retained, 0);
        }
    }

    #[test]
    fn full_probability_on_a_complete_graph_drops_nothing() {
        let ds = toy_dataset(10, 4, 2);
        let mut cfg = ReconductConfig::new(CameraGraph::complete(4).unwrap());
        cfg.move_probability = 1.0;
        let (out, stats) = reconduct(&ds, &cfg).unwrap();
        assert_eq!(stats.images_kept, stats.images_in);
        assert_eq!(out.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&out.samples) {
            assert_eq!(a.filename, b.filename);
        }
        for stat in stats.edge_stats.values() {
            assert_eq!(stat.retained, stat.trials);
        }
    }

    #[test]
    fn output_is_a_sub_multiset_with_labels_intact() {
        let ds = toy_dataset(20, 3, 2);
        let mut cfg = ReconductConfig::new(CameraGraph::line(3).unwrap());
        cfg.move_probability = 0.4;
        cfg.seed = 5;
        let (out, stats) = reconduct(&ds, &cfg).unwrap();
        assert_eq!(out.samples.len(), stats.images_kept);
        // Filenames are unique in the toy set, so sub-multiset means: every
        // output sample matches one input sample exactly, no repeats.
        let mut seen = BTreeSet::new();
        for s in &out.samples {
            assert!(seen.insert(s.filename.clone()), "duplicate {}", s.filename);
            let original = ds
                .samples
                .iter()
                .find(|o| o.filename == s.filename)
                .expect("invented image");
            assert_eq!(original.person_id, s.person_id);
            assert_eq!(original.camera_local, s.camera_local);
            assert_eq!(original.image.data(), s.image.data());
        }
    }

    #[test]
    fn home_camera_is_the_majority_camera_with_ties_to_the_lowest() {
        // pid 0: two images in camera 1 and one in camera 0 -> home 1.
        // pid 1: one image in each of cameras 0 and 2 -> tie, home 0.
        let mut ds = toy_dataset(0, 3, 0);
        let mut push = |pid: u32, cam: usize, seq: usize| {
            ds.samples.push(Sample {
                image: Tensor::zeros(&[1, 2, 2]),
                person_id: Some(pid),
                camera_local: cam,
                camera_id: cam,
                domain: Domain::Source,
                filename: format!("{pid:04}_c{}_{seq:04}.png", cam + 1),
            });
        };
        push(0, 1, 0);
        push(0, 1, 1);
        push(0, 0, 0);
        push(1, 0, 0);
        push(1, 2, 0);
        ds.rebuild_id_classes();

        let mut cfg = ReconductConfig::new(CameraGraph::complete(3).unwrap());
        cfg.move_probability = 0.0;
        let (out, _) = reconduct(&ds, &cfg).unwrap();
        let cams_of = |pid: u32| -> BTreeSet<usize> {
            out.samples
                .iter()
                .filter(|s| s.person_id == Some(pid))
                .map(|s| s.camera_local)
                .collect()
        };
        assert_eq!(cams_of(0), BTreeSet::from([1]));
        assert_eq!(cams_of(1), BTreeSet::from([0]));
    }

    #[test]
    fn empirical_retention_frequency_matches_the_probability() {
        // An extra image in camera pid % 3 gives each identity a clear
        // home, spreading trials over both line edges.
        let mut ds = toy_dataset(100, 3, 1);
        for pid in 0..100u32 {
            let cam = pid as usize % 3;
            ds.samples.push(Sample {
                image: Tensor::zeros(&[1, 2, 2]),
                person_id: Some(pid),
                camera_local: cam,
                camera_id: cam,
                domain: Domain::Source,
                filename: format!("{pid:04}_c{}_0099.png", cam + 1),
            });
        }
        let graph = CameraGraph::line(3).unwrap();
        let mut trials = 0usize;
        let mut retained = 0usize;
        let mut per_edge: BTreeMap<(usize, usize), EdgeStat> = BTreeMap::new();
        for seed in 0..30 {
            let cfg = ReconductConfig {
                graph: graph.clone(),
                move_probability: 0.25,
                seed,
            };
            let (_, stats) = reconduct(&ds, &cfg).unwrap();
            for (edge, stat) in stats.edge_stats {
                trials += stat.trials;
                retained += stat.retained;
                let agg = per_edge.entry(edge).or_default();
                agg.trials += stat.trials;
                agg.retained += stat.retained;
            }
        }
        assert!(trials >= 30 * 100, "every identity tries at least one edge");
        for (edge, stat) in per_edge {
            let freq = stat.retained as f64 / stat.trials as f64;
            assert!(
                (freq - 0.25).abs() <= 0.1,
                "edge {edge:?} retained at {freq:.3}"
            );
        }
        let overall = retained as f64 / trials as f64;
        assert!((overall - 0.25).abs() <= 0.05, "overall {overall:.3}");
    }

    #[test]
    fn retention_is_monotone_in_probability_under_paired_seeds() {
        let ds = toy_dataset(40, 4, 2);
        let graph = CameraGraph::line(4).unwrap();
        for seed in 0..10 {
            let mut last = 0usize;
            for p in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let cfg = ReconductConfig {
                    graph: graph.clone(),
                    move_probability: p,
                    seed,
                };
                let (_, stats) = reconduct(&ds, &cfg).unwrap();
                assert!(
                    stats.images_kept >= last,
                    "seed {seed}: p={p} kept {} after {last}",
                    stats.images_kept
                );
                last = stats.images_kept;
            }
            // Equal counts per camera put every home at camera 0, whose
            // only line neighbor is camera 1; p=1 keeps exactly those two
            // cameras out of four.
            assert_eq!(last, 40 * 2 * 2);
        }
    }

    #[test]
    fn unlabeled_and_out_of_graph_samples_are_rejected() {
        let mut ds = toy_dataset(2, 2, 1);
        ds.samples[0].person_id = None;
        let cfg = ReconductConfig::new(CameraGraph::line(2).unwrap());
        assert!(matches!(reconduct(&ds, &cfg), Err(Error::InvalidInput(_))));

        let ds = toy_dataset(2, 3, 1);
        let cfg = ReconductConfig::new(CameraGraph::line(2).unwrap());
        assert!(matches!(
            reconduct(&ds, &cfg),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn summary_rows_and_tables_report_the_documented_columns() {
        let empty = toy_dataset(0, 2, 0);
        let row = summarize(&empty);
        assert_eq!(row, DatasetRow { ids: 0, images: 0, cameras: 0, single_camera_fraction: 0.0 });

        let ds = toy_dataset(32, 3, 2);
        let mut cfg = ReconductConfig::new(CameraGraph::line(3).unwrap());
        cfg.move_probability = 0.0;
        let (out, _) = reconduct(&ds, &cfg).unwrap();
        let row = summarize(&out);
        assert!(row.ids <= 32);
        assert_eq!(row.single_camera_fraction, 1.0);

        let rows = vec![("toy".to_string(), summarize(&ds)), ("toy-new".to_string(), row)];
        let csv = stats_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(STATS_HEADER));
        assert_eq!(lines.next(), Some("toy,32,192,3,0.000000"));
        assert!(lines.next().unwrap().starts_with("toy-new,"));

        let text = stats_text(&rows);
        for line in text.lines() {
            assert!(!line.ends_with(' '));
        }
        assert!(text.starts_with("dataset"));
        assert!(text.contains("toy-new"));
    }

    #[test]
    fn monotonicity_of_ties_is_deterministic_across_runs() {
        let ds = toy_dataset(25, 3, 2);
        let cfg = ReconductConfig::new(CameraGraph::line(3).unwrap());
        let (a, sa) = reconduct(&ds, &cfg).unwrap();
        let (b, sb) = reconduct(&ds, &cfg).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        assert_eq!(sa.images_kept, sb.images_kept);
        assert_eq!(sa.edge_stats, sb.edge_stats);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.filename, y.filename);
        }
    }
}
