use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

/// Sentences closer than this many edits are merged.
pub const MAX_EDIT_DISTANCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicCluster {
    pub representative: String,
    /// Sorted, deduplicated.
    pub members: Vec<String>,
}

/// Cluster id to cluster. Ids follow the sorted order of representatives.
pub type TopicDictionary = BTreeMap<usize, TopicCluster>;

/// Deduplicates `sentences`, then links every pair within
/// [`MAX_EDIT_DISTANCE`] Levenshtein edits (single linkage).
pub fn topic_cluster<S: AsRef<str>>(sentences: &[S]) -> TopicDictionary {
    let unique: Vec<&str> = sentences.iter().map(AsRef::as_ref).collect::<BTreeSet<_>>().into_iter().collect();
    let chars: Vec<usize> = unique.iter().map(|s| s.chars().count()).collect();
    let mut uf = UnionFind::<usize>::new(unique.len());
    for i in 0..unique.len() {
        for j in i + 1..unique.len() {
            if chars[i].abs_diff(chars[j]) > MAX_EDIT_DISTANCE {
                continue;
            }
            if strsim::levenshtein(unique[i], unique[j]) <= MAX_EDIT_DISTANCE {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, s) in unique.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push((*s).to_string());
    }
    // members are already sorted because `unique` is
    let mut clusters: Vec<TopicCluster> = groups
        .into_values()
        .map(|members| TopicCluster { representative: members[0].clone(), members })
        .collect();
    clusters.sort_by(|a, b| a.representative.cmp(&b.representative));
    clusters.into_iter().enumerate().collect()
}
