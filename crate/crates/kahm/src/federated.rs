//! Distance-only federated aggregation.
//!
//! Parties train local per-class compositions on locally fabricated data and
//! answer queries with scalar distances only. The aggregator never touches a
//! model: the global label is the argmin over classes of the per-class
//! minimum across parties, evaluated on a (query, party, class, Γ) table
//! that can be serialized, shipped, and replayed.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::classify::{ClassifierModel, Provenance};
use crate::compose::{fit_wide, WideKahm};
use crate::dataset::{DataMatrix, LabeledDataset};
use crate::error::{KahmError, Result};
use crate::fabricate::fabricate_big;
use crate::privacy::PrivacySpec;
use crate::seed::derive_seed;

/// One participant: an optional per-class model (absent when the party holds
/// too few samples of that class) plus provenance of its training data.
#[derive(Debug, Clone)]
pub struct Party {
    /// 1-based party id.
    pub id: usize,
    /// Index c-1 holds the model of class c, when present.
    pub class_models: Vec<Option<WideKahm>>,
    pub provenance: Provenance,
}

impl Party {
    pub fn has_any_model(&self) -> bool {
        self.class_models.iter().any(Option::is_some)
    }
}

/// All parties plus the shared label space.
#[derive(Debug, Clone)]
pub struct GlobalClassifier {
    pub parties: Vec<Party>,
    pub class_names: Vec<String>,
}

/// One row of the distance-table interchange format.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRecord {
    pub query_id: u64,
    /// 1-based party id.
    pub party: usize,
    /// 1-based class id.
    pub class: usize,
    /// May be +∞ for a missing (party, class) model.
    pub gamma: f64,
}

/// Pick the closest of several party models for one class.
///
/// Returns the winning 1-based party index and that party's image of the
/// query. Missing models are skipped; ties go to the smallest party id.
pub fn combine_kahms(
    models: &[Option<&WideKahm>],
    y: &DVector<f64>,
) -> Result<(usize, DVector<f64>)> {
    let mut best: Option<(usize, f64, DVector<f64>)> = None;
    for (q, model) in models.iter().enumerate() {
        let Some(model) = model else { continue };
        let Ok((_, image)) = model.evaluate(y) else { continue };
        let d = (y - &image).norm();
        if best.as_ref().is_none_or(|(_, bd, _)| d < *bd) {
            best = Some((q + 1, d, image));
        }
    }
    match best {
        Some((q, _, image)) => Ok((q, image)),
        None => Err(KahmError::invalid("no party model available for this class")),
    }
}

impl GlobalClassifier {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn party_count(&self) -> usize {
        self.parties.len()
    }

    /// Every class must be covered by at least one party.
    pub fn validate(&self) -> Result<()> {
        if self.parties.is_empty() {
            return Err(KahmError::invalid("no parties"));
        }
        for party in &self.parties {
            if !party.has_any_model() {
                return Err(KahmError::invalid(format!(
                    "party {} holds no class model",
                    party.id
                )));
            }
        }
        for c in 1..=self.class_count() {
            let covered = self
                .parties
                .iter()
                .any(|p| p.class_models[c - 1].is_some());
            if !covered {
                return Err(KahmError::invalid(format!("class {c} covered by no party")));
            }
        }
        Ok(())
    }

    /// The per-(party, class) distance table for one query. Missing models
    /// contribute Γ = +∞ and can never win.
    pub fn distance_table(&self, y: &DVector<f64>, query_id: u64) -> Vec<DistanceRecord> {
        let per_party: Vec<Vec<f64>> = self
            .parties
            .par_iter()
            .map(|party| {
                party
                    .class_models
                    .iter()
                    .map(|m| match m {
                        Some(w) => w.distance(y).map(|(_, g)| g).unwrap_or(f64::INFINITY),
                        None => f64::INFINITY,
                    })
                    .collect()
            })
            .collect();
        let mut records = Vec::with_capacity(self.parties.len() * self.class_count());
        for (qi, gammas) in per_party.iter().enumerate() {
            for (ci, &gamma) in gammas.iter().enumerate() {
                records.push(DistanceRecord {
                    query_id,
                    party: self.parties[qi].id,
                    class: ci + 1,
                    gamma,
                });
            }
        }
        records
    }

    /// Global label: argmin over classes of the per-class minimum across
    /// parties. The prediction is computed *from the distance table alone*.
    pub fn predict(&self, y: &DVector<f64>) -> Result<(usize, Vec<DistanceRecord>)> {
        let table = self.distance_table(y, 0);
        let labels = aggregate_distance_table(&table)?;
        let label = *labels.get(&0).ok_or_else(|| KahmError::invalid("no distances"))?;
        Ok((label, table))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.data.n_rows() == 0 {
            return Err(KahmError::invalid("empty dataset"));
        }
        let hits: usize = (0..data.data.n_rows())
            .into_par_iter()
            .map(|i| {
                self.predict(&data.data.row(i))
                    .map(|(l, _)| usize::from(l == data.labels[i]))
                    .unwrap_or(0)
            })
            .sum();
        Ok(hits as f64 / data.data.n_rows() as f64)
    }
}

/// Fold a distance table into one label per query id.
///
/// Ties go to the smallest class index; a query whose distances are all +∞
/// yields an error.
pub fn aggregate_distance_table(records: &[DistanceRecord]) -> Result<BTreeMap<u64, usize>> {
    let mut per_query: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
    for rec in records {
        let class_min = per_query.entry(rec.query_id).or_default();
        let entry = class_min.entry(rec.class).or_insert(f64::INFINITY);
        if rec.gamma < *entry {
            *entry = rec.gamma;
        }
    }
    let mut labels = BTreeMap::new();
    for (query, class_min) in per_query {
        let mut best: Option<(usize, f64)> = None;
        for (&class, &gamma) in &class_min {
            if gamma.is_finite() && best.is_none_or(|(_, bg)| gamma < bg) {
                best = Some((class, gamma));
            }
        }
        let (label, _) = best.ok_or_else(|| {
            KahmError::invalid(format!("query {query}: every distance is infinite"))
        })?;
        labels.insert(query, label);
    }
    Ok(labels)
}

/// Write records as `query_id,party,class,gamma` CSV ("inf" for +∞).
pub fn write_distance_table(records: &[DistanceRecord], w: &mut impl Write) -> Result<()> {
    writeln!(w, "query_id,party,class,gamma")?;
    for r in records {
        if r.gamma.is_infinite() {
            writeln!(w, "{},{},{},inf", r.query_id, r.party, r.class)?;
        } else {
            writeln!(w, "{},{},{},{:?}", r.query_id, r.party, r.class, r.gamma)?;
        }
    }
    Ok(())
}

/// Parse the CSV produced by [`write_distance_table`].
pub fn read_distance_table(r: &mut impl BufRead) -> Result<Vec<DistanceRecord>> {
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(KahmError::Parse {
                line: i + 1,
                col: 1,
                msg: format!("expected 4 fields, found {}", parts.len()),
            });
        }
        let parse = |s: &str, col: usize| -> Result<f64> {
            s.trim().parse().map_err(|_| KahmError::Parse {
                line: i + 1,
                col,
                msg: format!("bad number {s:?}"),
            })
        };
        records.push(DistanceRecord {
            query_id: parse(parts[0], 1)? as u64,
            party: parse(parts[1], 2)? as usize,
            class: parse(parts[2], 3)? as usize,
            gamma: parse(parts[3], 4)?,
        });
    }
    Ok(records)
}

/// Data-distribution scenario of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Every class wholly owned by one party; requires Q = C.
    ClassPerParty,
    /// Every class split evenly between two parties; requires Q = 2C.
    ClassSplitTwo,
    /// Rows assigned uniformly at random to Q ≥ 2 parties.
    UniformRandom,
}

impl Scenario {
    pub fn from_number(n: usize) -> Result<Scenario> {
        match n {
            1 => Ok(Scenario::ClassPerParty),
            2 => Ok(Scenario::ClassSplitTwo),
            3 => Ok(Scenario::UniformRandom),
            other => Err(KahmError::invalid(format!("unknown scenario {other}"))),
        }
    }
}

/// Outcome of one federated simulation.
#[derive(Debug, Clone)]
pub struct ScenarioMetrics {
    pub global_accuracy: f64,
    /// Same fabricated data pooled into one classifier.
    pub centralized_accuracy: f64,
    /// global - centralized.
    pub accuracy_delta: f64,
    pub party_count: usize,
    /// (party, class) pairs that were skipped for lack of samples.
    pub omitted_models: Vec<(usize, usize)>,
}

/// Partition training rows per scenario, fabricate locally per (party,
/// class), fit local models, and compare the distance-only global classifier
/// against a centralized classifier fit on the pooled fabricated data.
///
/// Fit seeds are derived from (seed, class) only, so a party and the pooled
/// reference train identical models whenever they see identical data — which
/// makes Scenario 1's accuracy delta exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn simulate_scenario(
    train: &LabeledDataset,
    test: &LabeledDataset,
    scenario: Scenario,
    parties: usize,
    spec: &PrivacySpec,
    n: usize,
    layers: usize,
    seed: u64,
) -> Result<ScenarioMetrics> {
    simulate_scenario_with_global(train, test, scenario, parties, spec, n, layers, seed)
        .map(|(m, _)| m)
}

/// [`simulate_scenario`] plus the fitted global classifier, for callers that
/// go on to export distance tables.
#[allow(clippy::too_many_arguments)]
pub fn simulate_scenario_with_global(
    train: &LabeledDataset,
    test: &LabeledDataset,
    scenario: Scenario,
    parties: usize,
    spec: &PrivacySpec,
    n: usize,
    layers: usize,
    seed: u64,
) -> Result<(ScenarioMetrics, GlobalClassifier)> {
    spec.validate()?;
    let c = train.class_count();
    match scenario {
        Scenario::ClassPerParty if parties != c => {
            return Err(KahmError::invalid(format!(
                "scenario 1 requires exactly {c} parties (one per class)"
            )));
        }
        Scenario::ClassSplitTwo if parties != 2 * c => {
            return Err(KahmError::invalid(format!(
                "scenario 2 requires exactly {} parties (two per class)",
                2 * c
            )));
        }
        Scenario::UniformRandom if parties < 2 => {
            return Err(KahmError::invalid("scenario 3 requires at least 2 parties"));
        }
        _ => {}
    }

    let row_party = assign_rows(train, scenario, parties, seed);

    // Fabricate per (party, class); collect for both the local models and
    // the pooled centralized reference.
    let mut fabricated: Vec<Vec<Option<DataMatrix>>> = vec![vec![None; c]; parties];
    let mut omitted = Vec::new();
    let jobs: Vec<(usize, usize, Vec<usize>)> = (0..parties)
        .flat_map(|q| {
            (1..=c).map(move |class| (q, class)).collect::<Vec<_>>()
        })
        .map(|(q, class)| {
            let rows: Vec<usize> = (0..train.data.n_rows())
                .filter(|&i| row_party[i] == q && train.labels[i] == class)
                .collect();
            (q, class, rows)
        })
        .collect();
    let outcomes: Vec<(usize, usize, Option<Result<DataMatrix>>)> = jobs
        .into_par_iter()
        .map(|(q, class, rows)| {
            if rows.len() < 2 {
                return (q, class, None);
            }
            let result = (|| {
                let local = train.data.select_rows(&rows)?;
                if local.distinct_row_indices().len() < 2 {
                    return Ok(None);
                }
                let fab_seed = derive_seed(spec.seed, "fed-fab", (q as u64) << 32 | class as u64);
                let fab = fabricate_big(&local, n, &spec.with_seed(fab_seed))?;
                Ok(Some(fab))
            })();
            match result {
                Ok(Some(fab)) => (q, class, Some(Ok(fab))),
                Ok(None) => (q, class, None),
                Err(e) => (q, class, Some(Err(e))),
            }
        })
        .collect();
    for (q, class, outcome) in outcomes {
        match outcome {
            Some(Ok(fab)) => fabricated[q][class - 1] = Some(fab),
            Some(Err(e)) => {
                return Err(KahmError::Subset { subset: q + 1, source: Box::new(e) })
            }
            None => omitted.push((q + 1, class)),
        }
    }

    // Local models: per-class fit seed shared across parties (and with the
    // centralized reference below).
    let mut parties_out = Vec::with_capacity(parties);
    for (q, per_class) in fabricated.iter().enumerate() {
        let models: Vec<Option<WideKahm>> = per_class
            .par_iter()
            .enumerate()
            .map(|(ci, fab)| {
                fab.as_ref().and_then(|f| {
                    fit_wide(f, n, layers, None, derive_seed(seed, "class-fit", ci as u64 + 1))
                        .ok()
                })
            })
            .collect();
        parties_out.push(Party {
            id: q + 1,
            class_models: models,
            provenance: Provenance::DpFabricated(*spec),
        });
    }
    let global = GlobalClassifier {
        parties: parties_out,
        class_names: train.class_names.clone(),
    };
    global.validate()?;

    // Centralized reference: pool the same fabricated matrices per class.
    let pooled: Vec<(String, DataMatrix)> = (1..=c)
        .map(|class| {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for per_class in &fabricated {
                if let Some(fab) = &per_class[class - 1] {
                    for i in 0..fab.n_rows() {
                        rows.push(fab.row(i).iter().cloned().collect());
                    }
                }
            }
            let m = DataMatrix::from_rows(&rows)?;
            Ok((train.class_names[class - 1].clone(), m))
        })
        .collect::<Result<_>>()?;
    let centralized = pooled_classifier(pooled, n, layers, seed, *spec)?;

    let global_accuracy = global.accuracy(test)?;
    let centralized_accuracy = centralized.accuracy(test)?;
    Ok((
        ScenarioMetrics {
            global_accuracy,
            centralized_accuracy,
            accuracy_delta: global_accuracy - centralized_accuracy,
            party_count: parties,
            omitted_models: omitted,
        },
        global,
    ))
}

fn pooled_classifier(
    class_matrices: Vec<(String, DataMatrix)>,
    n: usize,
    layers: usize,
    seed: u64,
    spec: PrivacySpec,
) -> Result<ClassifierModel> {
    let fitted: Vec<Result<WideKahm>> = class_matrices
        .par_iter()
        .enumerate()
        .map(|(idx, (_, m))| {
            fit_wide(m, n, layers, None, derive_seed(seed, "class-fit", idx as u64 + 1))
        })
        .collect();
    let mut class_models = Vec::with_capacity(class_matrices.len());
    for f in fitted {
        class_models.push(f?);
    }
    let branch_counts = class_models.iter().map(|w| w.branch_count()).collect();
    Ok(ClassifierModel {
        class_models,
        class_names: class_matrices.into_iter().map(|(name, _)| name).collect(),
        subspace_dim: n,
        layers,
        branch_counts,
        provenance: Provenance::DpFabricated(spec),
    })
}

/// Map every training row to a 0-based party index per the scenario.
fn assign_rows(
    train: &LabeledDataset,
    scenario: Scenario,
    parties: usize,
    seed: u64,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n = train.data.n_rows();
    match scenario {
        Scenario::ClassPerParty => train.labels.iter().map(|&l| l - 1).collect(),
        Scenario::ClassSplitTwo => {
            let mut assignment = vec![0usize; n];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                "scenario-split",
                0,
            ));
            for class in 1..=train.class_count() {
                let mut rows = train.class_rows(class);
                rows.shuffle(&mut rng);
                let half = rows.len() / 2;
                for (k, &i) in rows.iter().enumerate() {
                    let sub = usize::from(k >= half);
                    assignment[i] = 2 * (class - 1) + sub;
                }
            }
            assignment
        }
        Scenario::UniformRandom => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                "scenario-random",
                0,
            ));
            use rand::Rng;
            (0..n).map(|_| rng.random_range(0..parties)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_blobs;

    fn blobs(per: usize, seed: u64) -> LabeledDataset {
        gaussian_blobs(&[vec![0.0, 0.0], vec![7.0, 0.0], vec![3.5, 6.0]], per, 0.5, seed)
    }

    fn quick_spec(seed: u64) -> PrivacySpec {
        PrivacySpec::new(16.0, 1e-5, 2.0, seed).unwrap()
    }

    #[test]
    fn combine_single_party_is_identity_wrapper() {
        let ds = blobs(30, 1);
        let m1 = fit_wide(&ds.class_matrix(1).unwrap(), 2, 1, None, 5).unwrap();
        let y = ds.data.row(0);
        let (q, image) = combine_kahms(&[Some(&m1)], &y).unwrap();
        assert_eq!(q, 1);
        let (_, direct) = m1.evaluate(&y).unwrap();
        assert_eq!(image, direct);
    }

    #[test]
    fn combine_picks_nearest_hull() {
        let ds = blobs(30, 2);
        let m1 = fit_wide(&ds.class_matrix(1).unwrap(), 2, 1, None, 5).unwrap();
        let m2 = fit_wide(&ds.class_matrix(2).unwrap(), 2, 1, None, 5).unwrap();
        let m3 = fit_wide(&ds.class_matrix(3).unwrap(), 2, 1, None, 5).unwrap();
        // A point inside blob 2.
        let y = DVector::from_vec(vec![7.1, 0.2]);
        let (q, _) = combine_kahms(&[Some(&m1), Some(&m2), Some(&m3)], &y).unwrap();
        assert_eq!(q, 2);
    }

    #[test]
    fn combine_skips_missing_models() {
        let ds = blobs(30, 3);
        let m2 = fit_wide(&ds.class_matrix(2).unwrap(), 2, 1, None, 5).unwrap();
        let y = DVector::from_vec(vec![0.0, 0.0]);
        let (q, _) = combine_kahms(&[None, Some(&m2)], &y).unwrap();
        assert_eq!(q, 2);
        assert!(combine_kahms(&[None, None], &y).is_err());
    }

    #[test]
    fn distance_table_roundtrip() {
        let records = vec![
            DistanceRecord { query_id: 0, party: 1, class: 1, gamma: 0.25 },
            DistanceRecord { query_id: 0, party: 1, class: 2, gamma: f64::INFINITY },
            DistanceRecord { query_id: 1, party: 2, class: 1, gamma: 1.5e-3 },
        ];
        let mut buf = Vec::new();
        write_distance_table(&records, &mut buf).unwrap();
        let parsed = read_distance_table(&mut std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(parsed, records);
    }

    #[test]
    fn aggregation_ignores_infinite_parties() {
        let records = vec![
            DistanceRecord { query_id: 7, party: 1, class: 1, gamma: 2.0 },
            DistanceRecord { query_id: 7, party: 2, class: 1, gamma: f64::INFINITY },
            DistanceRecord { query_id: 7, party: 1, class: 2, gamma: 3.0 },
        ];
        let labels = aggregate_distance_table(&records).unwrap();
        assert_eq!(labels[&7], 1);
    }

    #[test]
    fn aggregation_all_infinite_errors() {
        let records = vec![DistanceRecord {
            query_id: 0,
            party: 1,
            class: 1,
            gamma: f64::INFINITY,
        }];
        assert!(aggregate_distance_table(&records).is_err());
    }

    #[test]
    fn aggregation_tie_goes_to_smallest_class() {
        let records = vec![
            DistanceRecord { query_id: 0, party: 1, class: 2, gamma: 1.5 },
            DistanceRecord { query_id: 0, party: 1, class: 1, gamma: 1.5 },
            DistanceRecord { query_id: 0, party: 1, class: 3, gamma: 1.5 },
        ];
        let labels = aggregate_distance_table(&records).unwrap();
        assert_eq!(labels[&0], 1);
    }

    #[test]
    fn single_party_global_matches_local_classifier() {
        let ds = blobs(30, 41);
        let local = crate::classify::fit_classifier(&ds, 2, 1, None, 9).unwrap();
        let global = GlobalClassifier {
            parties: vec![Party {
                id: 1,
                class_models: local.class_models.iter().cloned().map(Some).collect(),
                provenance: Provenance::Plain,
            }],
            class_names: ds.class_names.clone(),
        };
        let probes = blobs(20, 43);
        for i in 0..probes.data.n_rows() {
            let y = probes.data.row(i);
            let (local_label, _) = local.predict(&y).unwrap();
            let (global_label, _) = global.predict(&y).unwrap();
            assert_eq!(local_label, global_label, "row {i}");
        }
    }

    #[test]
    fn scenario_two_drop_is_marginal() {
        let train = blobs(40, 51);
        let test = blobs(40, 53);
        let metrics = simulate_scenario(
            &train,
            &test,
            Scenario::ClassSplitTwo,
            6,
            &quick_spec(61),
            2,
            1,
            71,
        )
        .unwrap();
        let drop = metrics.centralized_accuracy - metrics.global_accuracy;
        assert!(drop <= 0.02, "scenario 2 drop {drop}");
    }

    #[test]
    fn scenario_one_delta_exactly_zero() {
        let train = blobs(40, 11);
        let test = blobs(40, 13);
        let metrics = simulate_scenario(
            &train,
            &test,
            Scenario::ClassPerParty,
            3,
            &quick_spec(21),
            2,
            1,
            77,
        )
        .unwrap();
        assert_eq!(metrics.accuracy_delta, 0.0);
        assert!(metrics.global_accuracy > 0.9, "{}", metrics.global_accuracy);
    }

    #[test]
    fn scenario_requires_matching_party_count() {
        let train = blobs(20, 15);
        let test = blobs(10, 16);
        assert!(simulate_scenario(
            &train,
            &test,
            Scenario::ClassPerParty,
            5,
            &quick_spec(1),
            2,
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn added_all_infinite_party_changes_nothing() {
        let ds = blobs(25, 17);
        let m1 = fit_wide(&ds.class_matrix(1).unwrap(), 2, 1, None, 5).unwrap();
        let m2 = fit_wide(&ds.class_matrix(2).unwrap(), 2, 1, None, 6).unwrap();
        let m3 = fit_wide(&ds.class_matrix(3).unwrap(), 2, 1, None, 7).unwrap();
        let base = GlobalClassifier {
            parties: vec![Party {
                id: 1,
                class_models: vec![Some(m1), Some(m2), Some(m3)],
                provenance: Provenance::Plain,
            }],
            class_names: ds.class_names.clone(),
        };
        // Same classifier with a ghost party contributing only ∞ rows in the
        // table (simulated through records, since a model-less party is
        // rejected by validate()).
        for i in (0..ds.data.n_rows()).step_by(9) {
            let y = ds.data.row(i);
            let (label, mut table) = base.predict(&y).unwrap();
            for class in 1..=3 {
                table.push(DistanceRecord {
                    query_id: 0,
                    party: 2,
                    class,
                    gamma: f64::INFINITY,
                });
            }
            let relabeled = aggregate_distance_table(&table).unwrap();
            assert_eq!(relabeled[&0], label);
        }
    }
}
