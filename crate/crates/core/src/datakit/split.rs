//! Train/test partition of stations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How withheld stations are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    Explicit { withheld: Vec<String> },
    Random { count: usize, seed: u64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Explicit { withheld: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Training station ids, in input order.
    pub train: Vec<String>,
    /// Withheld station ids, in input order.
    pub test: Vec<String>,
}

impl Split {
    pub fn is_test(&self, id: &str) -> bool {
        self.test.iter().any(|t| t == id)
    }
}

pub fn split(stations: &[String], spec: &SplitSpec) -> Result<Split> {
    for (i, s) in stations.iter().enumerate() {
        if stations[..i].contains(s) {
            return Err(Error::Data(format!("duplicate station id {s}")));
        }
    }
    let withheld: Vec<String> = match spec {
        SplitSpec::Explicit { withheld } => {
            for (i, w) in withheld.iter().enumerate() {
                if !stations.contains(w) {
                    return Err(Error::Config(format!("withheld station {w} is unknown")));
                }
                if withheld[..i].contains(w) {
                    return Err(Error::Config(format!("withheld station {w} listed twice")));
                }
            }
            withheld.clone()
        }
        SplitSpec::Random { count, seed } => {
            if *count >= stations.len() && !stations.is_empty() {
                return Err(Error::Config(format!(
                    "cannot withhold {count} of {} stations",
                    stations.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut sorted = stations.to_vec();
            sorted.sort();
            sorted.choose_multiple(&mut rng, *count).cloned().collect()
        }
    };
    let (test, train) = stations.iter().cloned().partition(|s| withheld.contains(s));
    Ok(Split { train, test })
}
