//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

/// Unrestricted Damerau-Levenshtein distance as a memoized recursion over
/// prefix lengths. A transposition may pair any earlier `a[k] == b[j]` with
/// any earlier `b[l] == a[i]`, paying for every symbol skipped in between.
pub fn dl_memo(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == 0 {
            return j;
        }
        if j == 0 {
            return i;
        }
        if let Some(&d) = memo.get(&(i, j)) {
            return d;
        }
        let mut best = (go(a, b, i - 1, j, memo) + 1)
            .min(go(a, b, i, j - 1, memo) + 1)
            .min(go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]));
        for k in 1..i {
            for l in 1..j {
                if a[k - 1] == b[j - 1] && a[i - 1] == b[l - 1] {
                    best = best.min(go(a, b, k - 1, l - 1, memo) + (i - k - 1) + 1 + (j - l - 1));
                }
            }
        }
        memo.insert((i, j), best);
        best
    }
    go(a, b, a.len(), b.len(), &mut HashMap::new())
}

/// Breadth-first search over whole strings with single insert, delete,
/// substitute and adjacent-swap moves. Only feasible for short inputs.
pub fn dl_bfs(a: &[u8], b: &[u8]) -> usize {
    let alphabet: BTreeSet<u8> = a.iter().chain(b).copied().collect();
    let max_len = a.len().max(b.len()) + 1;
    let mut seen: HashSet<Vec<u8>> = HashSet::from([a.to_vec()]);
    let mut queue = VecDeque::from([(a.to_vec(), 0usize)]);
    while let Some((s, d)) = queue.pop_front() {
        if s == b {
            return d;
        }
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut t = s.clone();
            t.remove(i);
            next.push(t);
            for &c in &alphabet {
                let mut t = s.clone();
                t[i] = c;
                next.push(t);
            }
            if i + 1 < s.len() {
                let mut t = s.clone();
                t.swap(i, i + 1);
                next.push(t);
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for &c in &alphabet {
                    let mut t = s.clone();
                    t.insert(i, c);
                    next.push(t);
                }
            }
        }
        for t in next {
            if seen.insert(t.clone()) {
                queue.push_back((t, d + 1));
            }
        }
    }
    unreachable!("target is always reachable")
}

/// `(SR, mAcc, mIoU)` in percent by direct counting.
pub fn planning_naive(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> (f64, f64, f64) {
    let n = preds.len();
    let mut exact = 0;
    let mut hits = 0;
    let mut positions = 0;
    let mut iou_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p == g {
            exact += 1;
        }
        for t in 0..g.len() {
            positions += 1;
            if p[t] == g[t] {
                hits += 1;
            }
        }
        let ps: BTreeSet<usize> = p.iter().copied().collect();
        let gs: BTreeSet<usize> = g.iter().copied().collect();
        let inter = ps.intersection(&gs).count() as f64;
        let union = ps.union(&gs).count() as f64;
        iou_sum += inter / union;
    }
    (
        100.0 * exact as f64 / n as f64,
        100.0 * hits as f64 / positions as f64,
        100.0 * iou_sum / n as f64,
    )
}
