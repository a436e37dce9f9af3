//! Ring crawler: walk right around the ring and check that every node agrees
//! with its first and second neighbors on each side.

use crate::overlay::{Direction, NodeId, Overlay};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Inconsistency {
    /// `neighbors(dir)[idx]` names a peer whose opposite list disagrees.
    Mismatch { dir: Direction, index: usize, peer: NodeId },
    DeadNeighbor(NodeId),
    NoNeighbors,
}

impl std::fmt::Display for Inconsistency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Inconsistency::Mismatch { dir, index, peer } => {
                write!(f, "{dir:?}[{index}]={peer} does not point back")
            }
            Inconsistency::DeadNeighbor(p) => write!(f, "neighbor {p} is gone"),
            Inconsistency::NoNeighbors => f.write_str("empty neighbor lists"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CrawlReport {
    pub visited: usize,
    pub inconsistent: Vec<(NodeId, Inconsistency)>,
    pub duration_hops: usize,
    /// Set when the walk could not continue past this node.
    pub stalled_at: Option<NodeId>,
}

impl CrawlReport {
    pub fn is_consistent(&self) -> bool {
        self.inconsistent.is_empty() && self.stalled_at.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CrawlError {
    #[error("crawl start {0:?} is not live")]
    UnknownStart(NodeId),
    #[error("crawl stalled at {0:?}")]
    CrawlStalled(NodeId),
}

/// The four mutual-agreement checks for one node.
pub fn node_congruence(ov: &Overlay, id: NodeId) -> Vec<Inconsistency> {
    let mut out = Vec::new();
    let Some(t) = ov.table(id) else {
        return out;
    };
    if ov.len() > 1 && t.left_neighbors().is_empty() && t.right_neighbors().is_empty() {
        out.push(Inconsistency::NoNeighbors);
        return out;
    }
    for dir in [Direction::Right, Direction::Left] {
        let back = match dir {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
        };
        for (index, peer) in t.neighbors(dir).iter().take(2).enumerate() {
            match ov.table(*peer) {
                None => out.push(Inconsistency::DeadNeighbor(*peer)),
                Some(pt) => {
                    if pt.neighbors(back).get(index) != Some(&id) {
                        out.push(Inconsistency::Mismatch { dir, index, peer: *peer });
                    }
                }
            }
        }
    }
    out
}

/// Walk right from `start` until the walk returns to it or every live node
/// has been visited once.
pub fn crawl(ov: &Overlay, start: NodeId) -> Result<CrawlReport, CrawlError> {
    if !ov.is_live(start) {
        return Err(CrawlError::UnknownStart(start));
    }
    let mut report = CrawlReport::default();
    let budget = ov.len();
    let mut cur = start;
    loop {
        report.visited += 1;
        for issue in node_congruence(ov, cur) {
            report.inconsistent.push((cur, issue));
        }
        let next = ov.table(cur).and_then(|t| t.right_neighbors().first().copied());
        let Some(next) = next else {
            if ov.len() > 1 {
                report.stalled_at = Some(cur);
            }
            break;
        };
        if next == start || report.visited >= budget {
            break;
        }
        if !ov.is_live(next) {
            report.stalled_at = Some(cur);
            break;
        }
        report.duration_hops += 1;
        cur = next;
    }
    Ok(report)
}

/// Crawl from the lowest live id. An empty overlay is trivially consistent.
pub fn crawl_all(ov: &Overlay) -> CrawlReport {
    match ov.live_ids().next() {
        Some(start) => crawl(ov, start).expect("start is live"),
        None => CrawlReport::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::world::stable_overlay;

    #[test]
    fn single_node_is_consistent() {
        let (ov, ids) = stable_overlay(1, 1);
        let r = crawl(&ov, ids[0]).unwrap();
        assert_eq!(r.visited, 1);
        assert!(r.is_consistent());
    }

    #[test]
    fn stabilized_ring_visits_everyone() {
        let (ov, ids) = stable_overlay(64, 2);
        let r = crawl(&ov, ids[17]).unwrap();
        assert_eq!(r.visited, 64);
        assert_eq!(r.duration_hops, 63);
        assert!(r.is_consistent(), "{:?}", r.inconsistent);
    }

    #[test]
    fn stale_neighbor_is_flagged() {
        let (mut ov, ids) = stable_overlay(32, 3);
        let mut sorted = ids.clone();
        sorted.sort();
        let victim = sorted[5];
        ov.table_mut(victim).unwrap().inject_stale_neighbor(Direction::Right, 1, sorted[9]);
        let r = crawl_all(&ov);
        assert_eq!(r.visited, 32);
        let flagged: std::collections::BTreeSet<NodeId> = r.inconsistent.iter().map(|(n, _)| *n).collect();
        // The victim, and the true second neighbor that no longer gets
        // pointed back at.
        assert_eq!(flagged, [victim, sorted[7]].into());
    }

    #[test]
    fn stale_first_neighbor_shortens_the_walk() {
        let (mut ov, ids) = stable_overlay(32, 3);
        let mut sorted = ids.clone();
        sorted.sort();
        ov.table_mut(sorted[5]).unwrap().inject_stale_neighbor(Direction::Right, 0, sorted[9]);
        let r = crawl_all(&ov);
        assert!(r.visited < 32);
        assert!(r.inconsistent.iter().any(|(n, _)| *n == sorted[5]));
    }

    #[test]
    fn dead_start_is_an_error() {
        let (mut ov, ids) = stable_overlay(8, 4);
        ov.kill(ids[0]).unwrap();
        assert_eq!(crawl(&ov, ids[0]), Err(CrawlError::UnknownStart(ids[0])));
    }
}
