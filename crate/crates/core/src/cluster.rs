//! Cluster fleet model: nodes, exclusive GPU + memory allocation, and
//! sinfo-style summaries.
//!
//! Placement is first-fit over the fleet in fixed order, granting the
//! lowest-numbered free GPU indices on the chosen node. A granted GPU belongs
//! to exactly one live allocation until released.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::jobspec::JobRequest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClusterError {
    #[error("unknown allocation for job {0}")]
    UnknownAllocation(u64),
    #[error("unknown node {0}")]
    UnknownNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Idle,
    Mixed,
    Allocated,
    Down,
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeState::Idle => "IDLE",
            NodeState::Mixed => "MIXED",
            NodeState::Allocated => "ALLOCATED",
            NodeState::Down => "DOWN",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub gpus_total: u32,
    pub mem_total_mb: u64,
    pub cpus: u32,
    pub down: bool,
    pub gpu_busy: BTreeSet<u32>,
    pub mem_free_mb: u64,
}

impl Node {
    pub fn new(name: &str, gpus_total: u32, mem_total_mb: u64, cpus: u32) -> Self {
        Node {
            name: name.to_string(),
            gpus_total,
            mem_total_mb,
            cpus,
            down: false,
            gpu_busy: BTreeSet::new(),
            mem_free_mb: mem_total_mb,
        }
    }

    pub fn gpus_free(&self) -> u32 {
        self.gpus_total - self.gpu_busy.len() as u32
    }

    /// Node state is derived, never stored.
    pub fn state(&self) -> NodeState {
        if self.down {
            NodeState::Down
        } else if self.gpu_busy.is_empty() && self.mem_free_mb == self.mem_total_mb {
            NodeState::Idle
        } else if self.gpu_busy.len() as u32 == self.gpus_total && self.gpus_total > 0 {
            NodeState::Allocated
        } else {
            NodeState::Mixed
        }
    }

    fn fits(&self, req: &JobRequest) -> bool {
        !self.down && self.gpus_free() >= req.gpus && self.mem_free_mb >= req.mem_mb
    }

    /// Lowest-numbered free GPU indices, `count` of them.
    fn pick_gpus(&self, count: u32) -> BTreeSet<u32> {
        (0..self.gpus_total)
            .filter(|i| !self.gpu_busy.contains(i))
            .take(count as usize)
            .collect()
    }
}

/// An exclusive grant of GPUs and memory on one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub job_id: u64,
    pub node_name: String,
    pub gpu_indices: BTreeSet<u32>,
    pub mem_mb: u64,
}

/// The fleet in fixed scheduling order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fleet {
    nodes: Vec<Node>,
}

impl Fleet {
    pub fn new(nodes: Vec<Node>) -> Self {
        Fleet { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn set_down(&mut self, name: &str, down: bool) -> Result<(), ClusterError> {
        let node = self
            .node_mut(name)
            .ok_or_else(|| ClusterError::UnknownNode(name.to_string()))?;
        node.down = down;
        Ok(())
    }

    /// First-fit placement without mutating the fleet. Same inputs, same
    /// placement.
    pub fn find_placement(&self, req: &JobRequest) -> Option<(String, BTreeSet<u32>)> {
        self.nodes
            .iter()
            .find(|n| n.fits(req))
            .map(|n| (n.name.clone(), n.pick_gpus(req.gpus)))
    }

    /// First-fit allocation; `None` when nothing fits (a normal outcome).
    pub fn allocate(&mut self, job_id: u64, req: &JobRequest) -> Option<Allocation> {
        let (node_name, gpu_indices) = self.find_placement(req)?;
        let node = self.node_mut(&node_name).expect("placement names a node");
        node.gpu_busy.extend(gpu_indices.iter().copied());
        node.mem_free_mb -= req.mem_mb;
        Some(Allocation {
            job_id,
            node_name,
            gpu_indices,
            mem_mb: req.mem_mb,
        })
    }

    /// Return an allocation's GPUs and memory to its node.
    pub fn release(&mut self, alloc: &Allocation) -> Result<(), ClusterError> {
        let node = self
            .node_mut(&alloc.node_name)
            .ok_or(ClusterError::UnknownAllocation(alloc.job_id))?;
        for idx in &alloc.gpu_indices {
            if !node.gpu_busy.remove(idx) {
                return Err(ClusterError::UnknownAllocation(alloc.job_id));
            }
        }
        node.mem_free_mb += alloc.mem_mb;
        debug_assert!(node.mem_free_mb <= node.mem_total_mb);
        Ok(())
    }

    /// One summary row per node in fleet order: (name, state, "used/total",
    /// mem_free_mb).
    pub fn node_summary(&self) -> Vec<(String, NodeState, String, u64)> {
        self.nodes
            .iter()
            .map(|n| {
                (
                    n.name.clone(),
                    n.state(),
                    format!("{}/{}", n.gpu_busy.len(), n.gpus_total),
                    n.mem_free_mb,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(gpus: u32, mem_mb: u64) -> JobRequest {
        JobRequest {
            gpus,
            mem_mb,
            command: vec!["true".to_string()],
            ..JobRequest::default()
        }
    }

    #[test]
    fn allocates_lowest_free_index() {
        let mut fleet = Fleet::new(vec![Node::new("node0", 4, 128000, 32)]);
        let a = fleet.allocate(1, &req(1, 36000)).unwrap();
        assert_eq!(a.node_name, "node0");
        assert_eq!(a.gpu_indices, BTreeSet::from([0]));
        let b = fleet.allocate(2, &req(2, 1000)).unwrap();
        assert_eq!(b.gpu_indices, BTreeSet::from([1, 2]));
    }

    #[test]
    fn insufficient_gpus_is_none() {
        let mut fleet = Fleet::new(vec![Node::new("node0", 1, 128000, 32)]);
        fleet.allocate(1, &req(1, 1000)).unwrap();
        assert!(fleet.allocate(2, &req(2, 1000)).is_none());
    }

    #[test]
    fn first_fit_skips_full_node() {
        let mut fleet = Fleet::new(vec![
            Node::new("nodeA", 1, 4000, 8),
            Node::new("nodeB", 1, 4000, 8),
        ]);
        fleet.allocate(1, &req(1, 1000)).unwrap();
        let a = fleet.allocate(2, &req(1, 1000)).unwrap();
        assert_eq!(a.node_name, "nodeB");
    }

    #[test]
    fn down_nodes_are_skipped() {
        let mut fleet = Fleet::new(vec![
            Node::new("nodeA", 1, 4000, 8),
            Node::new("nodeB", 1, 4000, 8),
        ]);
        fleet.set_down("nodeA", true).unwrap();
        let a = fleet.allocate(1, &req(1, 1000)).unwrap();
        assert_eq!(a.node_name, "nodeB");
    }

    #[test]
    fn release_restores_state() {
        let mut fleet = Fleet::new(vec![Node::new("node0", 2, 4000, 8)]);
        let initial = fleet.clone();
        let a = fleet.allocate(1, &req(1, 1000)).unwrap();
        assert_eq!(fleet.node("node0").unwrap().state(), NodeState::Mixed);
        let b = fleet.allocate(2, &req(1, 1000)).unwrap();
        assert_eq!(fleet.node("node0").unwrap().state(), NodeState::Allocated);
        fleet.release(&b).unwrap();
        assert_eq!(fleet.node("node0").unwrap().state(), NodeState::Mixed);
        fleet.release(&a).unwrap();
        assert_eq!(fleet.node("node0").unwrap().state(), NodeState::Idle);
        assert_eq!(fleet, initial);
    }

    #[test]
    fn double_release_is_an_error() {
        let mut fleet = Fleet::new(vec![Node::new("node0", 2, 4000, 8)]);
        let a = fleet.allocate(1, &req(1, 1000)).unwrap();
        fleet.release(&a).unwrap();
        assert_eq!(fleet.release(&a), Err(ClusterError::UnknownAllocation(1)));
    }

    #[test]
    fn summary_rows() {
        let mut fleet = Fleet::new(vec![Node::new("node0", 4, 128000, 32)]);
        assert_eq!(
            fleet.node_summary(),
            vec![("node0".to_string(), NodeState::Idle, "0/4".to_string(), 128000)]
        );
        fleet.allocate(1, &req(1, 1000)).unwrap();
        let rows = fleet.node_summary();
        assert_eq!(rows[0].1, NodeState::Mixed);
        assert_eq!(rows[0].2, "1/4");
        assert_eq!(Fleet::default().node_summary(), vec![]);
    }
}
