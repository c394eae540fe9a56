//! Order-preserving alignment of claimed calls against ground truth.
//!
//! Pass one is a longest common subsequence over normalized tool names.
//! Among ground entries that keep the alignment maximal, a claim takes the
//! one closest in time (when both sides carry timestamps), then the earliest.
//! Pass two runs inside each gap between pass-one anchors and pairs leftover
//! calls whose names are within a small edit distance, so near-miss tool
//! names are detected without breaking order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ClaimedCall, GroundCall, Layer, MatchPair, MatchQuality};

/// Ground-call filtering applied before alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseFilter {
    /// Shell binaries never treated as agent actions.
    pub shell_denylist: BTreeSet<String>,
    /// When set, only these shell binaries are kept.
    pub shell_allowlist: Option<BTreeSet<String>>,
    /// JSON-RPC methods that are protocol housekeeping, not tool use.
    pub rpc_method_denylist: BTreeSet<String>,
}

const DEFAULT_SHELL_DENYLIST: &[&str] = &[
    ".", ":", "[", "[[", "alias", "bg", "builtin", "cd", "command", "declare", "echo", "eval",
    "exec", "exit", "export", "false", "fg", "hash", "jobs", "let", "local", "popd", "printf",
    "pushd", "pwd", "read", "readonly", "return", "set", "shift", "shopt", "source", "test",
    "trap", "true", "type", "typeset", "ulimit", "umask", "unalias", "unset", "wait",
];

const DEFAULT_RPC_DENYLIST: &[&str] = &[
    "initialize",
    "ping",
    "tools/list",
    "resources/list",
    "resources/templates/list",
    "prompts/list",
    "logging/setLevel",
    "completion/complete",
];

impl Default for NoiseFilter {
    fn default() -> Self {
        NoiseFilter {
            shell_denylist: DEFAULT_SHELL_DENYLIST.iter().map(|s| s.to_string()).collect(),
            shell_allowlist: None,
            rpc_method_denylist: DEFAULT_RPC_DENYLIST.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl NoiseFilter {
    /// No filtering at all.
    pub fn none() -> Self {
        NoiseFilter {
            shell_denylist: BTreeSet::new(),
            shell_allowlist: None,
            rpc_method_denylist: BTreeSet::new(),
        }
    }

    pub fn is_noise(&self, call: &GroundCall) -> bool {
        match call.layer {
            Layer::Shell => {
                self.shell_denylist.contains(&call.name)
                    || self
                        .shell_allowlist
                        .as_ref()
                        .is_some_and(|allow| !allow.contains(&call.name))
            }
            Layer::Rpc => call
                .method
                .as_ref()
                .is_some_and(|m| self.rpc_method_denylist.contains(m)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub noise_filter: NoiseFilter,
    /// Largest name edit distance still paired as `name_divergent`.
    pub max_name_distance: usize,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            noise_filter: NoiseFilter::default(),
            max_name_distance: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Alignment {
    pub pairs: Vec<MatchPair>,
    pub fabricated: Vec<ClaimedCall>,
    pub hidden: Vec<GroundCall>,
    /// Ground calls removed by the noise filter before alignment.
    pub filtered: Vec<GroundCall>,
}

pub fn align(claims: &[ClaimedCall], ground: &[GroundCall], opts: &AlignOptions) -> Alignment {
    let (kept, filtered): (Vec<&GroundCall>, Vec<&GroundCall>) =
        ground.iter().partition(|g| !opts.noise_filter.is_noise(g));

    // pass one: exact-name LCS anchors
    let anchors = lcs_pairs(claims, &kept, 0, claims.len(), 0, kept.len(), |c, g| c.tool == g.name);

    // pass two: fuzzy names inside every gap
    let mut all_pairs: Vec<(usize, usize)> = Vec::new();
    let mut prev = (0usize, 0usize);
    let bounds = anchors
        .iter()
        .copied()
        .chain(std::iter::once((claims.len(), kept.len())));
    for (ci, gi) in bounds {
        let fuzzy = lcs_pairs(claims, &kept, prev.0, ci, prev.1, gi, |c, g| {
            c.tool != g.name && edit_distance(&c.tool, &g.name) <= opts.max_name_distance
        });
        all_pairs.extend(fuzzy);
        if ci < claims.len() {
            all_pairs.push((ci, gi));
        }
        prev = (ci + 1, gi + 1);
    }
    all_pairs.sort_unstable();

    let mut matched_claims = vec![false; claims.len()];
    let mut matched_ground = vec![false; kept.len()];
    let pairs = all_pairs
        .into_iter()
        .map(|(ci, gi)| {
            matched_claims[ci] = true;
            matched_ground[gi] = true;
            let (c, g) = (&claims[ci], kept[gi]);
            let quality = if c.tool != g.name {
                MatchQuality::NameDivergent
            } else if c.input_canonical == g.input_canonical {
                MatchQuality::Exact
            } else {
                MatchQuality::InputDivergent
            };
            MatchPair {
                claimed: c.clone(),
                ground: g.clone(),
                quality,
            }
        })
        .collect();

    Alignment {
        pairs,
        fabricated: claims
            .iter()
            .zip(&matched_claims)
            .filter(|(_, m)| !**m)
            .map(|(c, _)| c.clone())
            .collect(),
        hidden: kept
            .iter()
            .zip(&matched_ground)
            .filter(|(_, m)| !**m)
            .map(|(g, _)| (*g).clone())
            .collect(),
        filtered: filtered.into_iter().cloned().collect(),
    }
}

/// Maximum order-preserving matching of `claims[c0..c1]` against
/// `ground[g0..g1]` under `eq`, with the tie-breaking described above.
fn lcs_pairs(
    claims: &[ClaimedCall],
    ground: &[&GroundCall],
    c0: usize,
    c1: usize,
    g0: usize,
    g1: usize,
    eq: impl Fn(&ClaimedCall, &GroundCall) -> bool,
) -> Vec<(usize, usize)> {
    let n = c1.saturating_sub(c0);
    let m = g1.saturating_sub(g0);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    // suffix table: len[i][j] = LCS of claims[c0+i..c1] and ground[g0+j..g1]
    let width = m + 1;
    let mut len = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            len[i * width + j] = if eq(&claims[c0 + i], ground[g0 + j]) {
                1 + len[(i + 1) * width + j + 1]
            } else {
                len[(i + 1) * width + j].max(len[i * width + j + 1])
            };
        }
    }

    let mut out = Vec::new();
    let mut j = 0;
    for i in 0..n {
        let best = len[i * width + j];
        if best == 0 {
            break;
        }
        let claim = &claims[c0 + i];
        let candidates = (j..m).filter(|&k| {
            eq(claim, ground[g0 + k]) && 1 + len[(i + 1) * width + k + 1] == best
        });
        let chosen = match claim.ts_hint {
            Some(hint) => candidates.min_by_key(|&k| {
                let d = (ground[g0 + k].ts.millis() - hint.millis()).unsigned_abs();
                (d, k)
            }),
            None => candidates.min(),
        };
        if let Some(k) = chosen {
            out.push((c0 + i, g0 + k));
            j = k + 1;
        }
    }
    out
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if ca == cb {
                diag
            } else {
                1 + diag.min(above).min(row[j])
            };
            diag = above;
        }
    }
    row[b.len()]
}
