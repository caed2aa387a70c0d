use serde::{Deserialize, Serialize};

pub const DEFAULT_ROSTER: [&str; 8] = [
    "Hepatology",
    "Oncology",
    "Immunology",
    "Infectious Disease",
    "Gastroenterology",
    "Nephrology",
    "Dermatology",
    "Hematology",
];

/// Numeric knobs of the diagnostic workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Dense retrieval cutoff.
    pub k: usize,
    /// Rerank cutoff.
    pub n: usize,
    pub h_max: usize,
    pub k_max: usize,
    pub prune_batch: usize,
    /// Reranked excerpts shown to the pruner.
    pub guideline_top: usize,
    /// Candidates offered to the aligner.
    pub match_limit: usize,
    pub tau_suff: f64,
    pub tau_high: f64,
    pub t_max: usize,
    pub roster: Vec<String>,
    pub max_specialists: usize,
    /// Refinement queries per round, at most.
    pub max_queries: usize,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            k: 8,
            n: 4,
            h_max: 3,
            k_max: 4,
            prune_batch: 8,
            guideline_top: 2,
            match_limit: 5,
            tau_suff: 0.5,
            tau_high: 0.9,
            t_max: 3,
            roster: DEFAULT_ROSTER.iter().map(|s| s.to_string()).collect(),
            max_specialists: 4,
            max_queries: 3,
        }
    }
}
