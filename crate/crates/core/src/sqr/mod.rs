//! Selective query recollection: later decoder stages additionally receive
//! query sets produced earlier in the cascade, each supervised on its own.

pub mod loss;
pub mod matching;
pub mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::QueryState;
use crate::error::{Error, Result};

pub use loss::{detection_loss, match_predictions, LossConfig, SetLoss};
pub use matching::{hungarian, MatchResult, MatchWeights};
pub use step::{
    final_detections, inference_forward, inference_forward_with, sqr_training_step, Detection, InferenceOutput, LossBreakdown, SetRecord,
    StagePredictions, TrainingLoss, MAX_DETECTIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum SqrVariant {
    Baseline,
    I,
    #[default]
    II,
    III,
}

impl SqrVariant {
    pub const ALL: [SqrVariant; 4] = [SqrVariant::Baseline, SqrVariant::I, SqrVariant::II, SqrVariant::III];

    /// (|C²|, |C³|), the number of query groups supervised at stages 2 and 3.
    pub fn group_counts(self) -> (usize, usize) {
        match self {
            SqrVariant::Baseline => (1, 1),
            SqrVariant::I => (1, 2),
            SqrVariant::II => (2, 3),
            SqrVariant::III => (2, 4),
        }
    }

    /// |C^j| for j = 1..=3.
    pub fn collection_size(self, j: usize) -> Result<usize> {
        let (c2, c3) = self.group_counts();
        match j {
            1 => Ok(1),
            2 => Ok(c2),
            3 => Ok(c3),
            _ => Err(Error::Config(format!("no query collection for stage {j}"))),
        }
    }
}

impl fmt::Display for SqrVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SqrVariant::Baseline => "baseline",
            SqrVariant::I => "I",
            SqrVariant::II => "II",
            SqrVariant::III => "III",
        })
    }
}

impl FromStr for SqrVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "none" => Ok(SqrVariant::Baseline),
            "i" | "1" => Ok(SqrVariant::I),
            "ii" | "2" => Ok(SqrVariant::II),
            "iii" | "3" => Ok(SqrVariant::III),
            _ => Err(Error::Config(format!("unknown SQR variant {s:?}"))),
        }
    }
}

/// A query set tagged with the stages it has passed through, starting at 0.
#[derive(Debug, Clone)]
pub struct CollectedQuery {
    pub path: Vec<usize>,
    pub state: QueryState,
}

impl CollectedQuery {
    pub fn tag(&self) -> String {
        path_tag(&self.path)
    }

    /// True for the plain cascade 0-1-…-k.
    pub fn is_primary(&self) -> bool {
        self.path.iter().enumerate().all(|(i, &s)| i == s)
    }
}

pub fn path_tag(path: &[usize]) -> String {
    path.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-")
}

/// C^j: the query sets fed to stage j. Entry 0 is always the primary chain.
#[derive(Debug, Clone)]
pub struct QueryCollection {
    pub stage: usize,
    pub entries: Vec<CollectedQuery>,
}

impl QueryCollection {
    /// C¹ = {q⁰}.
    pub fn initial(q0: QueryState) -> Self {
        Self {
            stage: 1,
            entries: vec![CollectedQuery { path: vec![0], state: q0 }],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tags(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.tag()).collect()
    }
}

/// Builds C^{j+1} from C^j and the stage-j outputs of each of its entries
/// (same order).
pub fn sqr_collect(variant: SqrVariant, j: usize, prior: &QueryCollection, outputs: Vec<QueryState>) -> Result<QueryCollection> {
    if !(1..=2).contains(&j) {
        return Err(Error::Config(format!("recollection is defined after stages 1 and 2, got {j}")));
    }
    if prior.stage != j || prior.len() != variant.collection_size(j)? {
        return Err(Error::Contract(format!(
            "C^{} with {} entries is not a valid {variant} collection for stage {j}",
            prior.stage,
            prior.len()
        )));
    }
    if outputs.len() != prior.len() {
        return Err(Error::Contract(format!("{} outputs for {} query sets", outputs.len(), prior.len())));
    }
    let mut entries: Vec<CollectedQuery> = prior
        .entries
        .iter()
        .zip(outputs)
        .map(|(e, state)| {
            let mut path = e.path.clone();
            path.push(j);
            CollectedQuery { path, state }
        })
        .collect();
    let recollected: Vec<&CollectedQuery> = match (variant, j) {
        (SqrVariant::Baseline, _) | (SqrVariant::I, 1) => vec![],
        // D^j(C^j) ∪ C^j
        (SqrVariant::I, _) | (SqrVariant::II, 1) | (SqrVariant::III, _) => prior.entries.iter().collect(),
        // D²(C²) ∪ D¹(C¹): keep the stage-1 outputs, drop q⁰ itself
        (SqrVariant::II, _) => prior.entries.iter().filter(|e| e.path.len() == j).collect(),
    };
    entries.extend(recollected.into_iter().cloned());
    let next = QueryCollection { stage: j + 1, entries };
    debug_assert_eq!(next.len(), variant.collection_size(j + 1)?);
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Tensor};

    fn state(v: f64) -> QueryState {
        QueryState {
            content: Tensor::full(v, (1, 2, 4), &Device::Cpu).unwrap(),
            boxes: Tensor::full(0.5, (1, 2, 4), &Device::Cpu).unwrap(),
        }
    }

    fn run(variant: SqrVariant) -> Vec<QueryCollection> {
        let mut c = QueryCollection::initial(state(0.0));
        let mut all = vec![c.clone()];
        for j in 1..=2 {
            let outs = c.entries.iter().map(|_| state(j as f64)).collect();
            c = sqr_collect(variant, j, &c, outs).unwrap();
            all.push(c.clone());
        }
        all
    }

    #[test]
    fn group_counts_per_variant() {
        for (v, want) in [
            (SqrVariant::Baseline, (1, 1)),
            (SqrVariant::I, (1, 2)),
            (SqrVariant::II, (2, 3)),
            (SqrVariant::III, (2, 4)),
        ] {
            let c = run(v);
            assert_eq!(c[0].len(), 1);
            assert_eq!((c[1].len(), c[2].len()), want, "{v}");
            assert_eq!(v.group_counts(), want);
        }
    }

    #[test]
    fn path_tags() {
        assert_eq!(run(SqrVariant::II)[2].tags(), vec!["0-1-2", "0-2", "0-1"]);
        assert_eq!(run(SqrVariant::II)[1].tags(), vec!["0-1", "0"]);
        assert_eq!(run(SqrVariant::III)[2].tags(), vec!["0-1-2", "0-2", "0-1", "0"]);
        assert_eq!(run(SqrVariant::I)[2].tags(), vec!["0-1-2", "0-1"]);
        assert_eq!(run(SqrVariant::Baseline)[2].tags(), vec!["0-1-2"]);
        for v in SqrVariant::ALL {
            for (j, c) in run(v).iter().enumerate() {
                assert!(c.entries[0].is_primary());
                assert_eq!(c.entries[0].path, (0..=j).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn recollected_entries_keep_their_state() {
        let c = run(SqrVariant::III);
        let v = |s: &QueryState| s.content.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let values: Vec<f64> = c[2].entries.iter().map(|e| v(&e.state)).collect();
        assert_eq!(values, vec![2.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn bad_inputs() {
        let c1 = QueryCollection::initial(state(0.0));
        assert!(matches!(sqr_collect(SqrVariant::II, 3, &c1, vec![state(1.0)]), Err(Error::Config(_))));
        assert!(matches!(sqr_collect(SqrVariant::II, 2, &c1, vec![state(1.0)]), Err(Error::Contract(_))));
        assert!(matches!(sqr_collect(SqrVariant::II, 1, &c1, vec![]), Err(Error::Contract(_))));
        assert!(matches!("IV".parse::<SqrVariant>(), Err(Error::Config(_))));
        for v in SqrVariant::ALL {
            assert_eq!(v.to_string().parse::<SqrVariant>().unwrap(), v);
        }
        assert_eq!(SqrVariant::default(), SqrVariant::II);
    }
}
