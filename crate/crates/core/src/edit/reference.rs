//! Brute-force references for the edit expert, independent of the LCS
//! tables: breadth-first search over the insertion/deletion edit graph and
//! exhaustive enumeration of deletion masks.

use std::collections::{HashMap, VecDeque};

use crate::vocab::{TokenId, TokenSeq, NUM_RESERVED};

/// All-pairs edit distances between interiors over a small alphabet.
///
/// Any shortest insertion/deletion path can be reordered to perform its
/// deletions first, so no intermediate string is longer than the longer
/// endpoint. Searching only strings up to `max_len` therefore yields exact
/// distances between strings of that length.
pub struct EditGraph {
    alphabet: Vec<TokenId>,
    strings: Vec<Vec<TokenId>>,
    index: HashMap<Vec<TokenId>, usize>,
    dist: Vec<Vec<u8>>,
}

impl EditGraph {
    /// Uses content ids `NUM_RESERVED..NUM_RESERVED + alphabet_size`.
    pub fn new(alphabet_size: usize, max_len: usize) -> Self {
        let alphabet: Vec<TokenId> = (0..alphabet_size)
            .map(|i| (NUM_RESERVED + i) as TokenId)
            .collect();
        let strings = enumerate_strings(&alphabet, max_len);
        let index: HashMap<_, _> = strings.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let neighbours: Vec<Vec<usize>> = strings
            .iter()
            .map(|s| {
                let mut out = Vec::new();
                for pos in 0..s.len() {
                    let mut t = s.clone();
                    t.remove(pos);
                    out.push(index[&t]);
                }
                if s.len() < max_len {
                    for pos in 0..=s.len() {
                        for &c in &alphabet {
                            let mut t = s.clone();
                            t.insert(pos, c);
                            out.push(index[&t]);
                        }
                    }
                }
                out.sort_unstable();
                out.dedup();
                out
            })
            .collect();
        let dist = (0..strings.len()).map(|src| bfs(&neighbours, src)).collect();
        Self {
            alphabet,
            strings,
            index,
            dist,
        }
    }

    pub fn alphabet(&self) -> &[TokenId] {
        &self.alphabet
    }

    /// Every interior string up to `max_len`, shortest first.
    pub fn strings(&self) -> &[Vec<TokenId>] {
        &self.strings
    }

    pub fn distance(&self, a: &[TokenId], b: &[TokenId]) -> usize {
        self.dist[self.index[a]][self.index[b]] as usize
    }

    pub fn seq_distance(&self, a: &TokenSeq, b: &TokenSeq) -> usize {
        self.distance(a.interior(), b.interior())
    }

    /// Smallest post-deletion distance to `target` over all `2^n` masks of
    /// the interior of `y`.
    pub fn best_deletion_distance(&self, y: &[TokenId], target: &[TokenId]) -> usize {
        let n = y.len();
        let mut best = usize::MAX;
        let mut kept = Vec::with_capacity(n);
        for mask in 0u32..(1 << n) {
            kept.clear();
            kept.extend(
                y.iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) == 0)
                    .map(|(_, t)| *t),
            );
            best = best.min(self.distance(&kept, target));
        }
        best
    }
}

fn enumerate_strings(alphabet: &[TokenId], max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet.len());
        for s in &frontier {
            for &c in alphabet {
                let mut t: Vec<TokenId> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn bfs(neighbours: &[Vec<usize>], src: usize) -> Vec<u8> {
    let mut dist = vec![u8::MAX; neighbours.len()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in &neighbours[u] {
            if dist[v] == u8::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}
