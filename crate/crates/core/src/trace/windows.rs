use std::collections::BTreeMap;

use super::{EventCategory, IngestError, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowKind {
    PythonFunction,
    CpuOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowNode {
    /// Index into the event list the forest was built from.
    pub event: usize,
    pub kind: WindowKind,
    pub thread_id: i64,
    pub start_us: i64,
    pub end_us: i64,
    pub seq_no: Option<i64>,
    pub parent: Option<usize>,
    /// Ordered by `start_us`.
    pub children: Vec<usize>,
    pub depth: u32,
}

impl WindowNode {
    pub fn contains_time(&self, t: i64) -> bool {
        self.start_us <= t && t <= self.end_us
    }

    pub fn duration(&self) -> i64 {
        self.end_us - self.start_us
    }
}

/// Per-thread call hierarchy of python-function and cpu-op windows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowForest {
    nodes: Vec<WindowNode>,
    roots: BTreeMap<i64, Vec<usize>>,
    node_of_event: Vec<Option<usize>>,
}

impl WindowForest {
    pub fn nodes(&self) -> &[WindowNode] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &WindowNode {
        &self.nodes[index]
    }

    pub fn threads(&self) -> impl Iterator<Item = i64> + '_ {
        self.roots.keys().copied()
    }

    pub fn roots(&self, thread_id: i64) -> &[usize] {
        self.roots.get(&thread_id).map_or(&[], Vec::as_slice)
    }

    pub fn node_for_event(&self, event: usize) -> Option<usize> {
        self.node_of_event.get(event).copied().flatten()
    }

    /// Strict ancestors of `node`, nearest first.
    pub fn ancestors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(self.nodes[node].parent, move |&n| self.nodes[n].parent)
    }

    pub fn nearest_python_ancestor(&self, node: usize) -> Option<usize> {
        self.ancestors(node)
            .find(|&n| self.nodes[n].kind == WindowKind::PythonFunction)
    }

    /// Every window on `thread_id` whose closed interval contains `t`.
    pub fn containing(&self, thread_id: i64, t: i64) -> Vec<usize> {
        let mut found = Vec::new();
        self.collect_containing(self.roots(thread_id), t, &mut found);
        found
    }

    fn collect_containing(&self, siblings: &[usize], t: i64, found: &mut Vec<usize>) {
        // siblings are disjoint apart from shared endpoints, so their ends
        // are non-decreasing in start order
        let upto = siblings.partition_point(|&n| self.nodes[n].start_us <= t);
        for &n in siblings[..upto].iter().rev() {
            if self.nodes[n].end_us < t {
                break;
            }
            found.push(n);
            self.collect_containing(&self.nodes[n].children, t, found);
        }
    }
}

/// Nests windows by time containment within each thread.
pub fn build_windows(events: &[TraceEvent]) -> Result<WindowForest, IngestError> {
    let mut per_thread: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if matches!(e.category, EventCategory::PythonFunction | EventCategory::CpuOp) {
            per_thread.entry(e.thread_id).or_default().push(i);
        }
    }

    let mut forest = WindowForest {
        node_of_event: vec![None; events.len()],
        ..WindowForest::default()
    };
    let mut offenders = Vec::new();

    for (thread_id, mut indices) in per_thread {
        // outer windows first when starts tie
        indices.sort_by_key(|&i| {
            let e = &events[i];
            (e.start_us, std::cmp::Reverse(e.end_us()), e.file_order)
        });
        let mut roots = Vec::new();
        let mut stack: Vec<usize> = Vec::new();
        for event in indices {
            let e = &events[event];
            let (start, end) = (e.start_us, e.end_us());
            let parent = loop {
                let Some(&top) = stack.last() else { break None };
                let t = &forest.nodes[top];
                if t.start_us <= start && end <= t.end_us {
                    break Some(top);
                }
                if t.end_us > start {
                    offenders.push((t.event, event));
                }
                stack.pop();
            };
            let id = forest.nodes.len();
            let depth = parent.map_or(0, |p| forest.nodes[p].depth + 1);
            forest.nodes.push(WindowNode {
                event,
                kind: if e.category == EventCategory::CpuOp {
                    WindowKind::CpuOp
                } else {
                    WindowKind::PythonFunction
                },
                thread_id,
                start_us: start,
                end_us: end,
                seq_no: e.seq_no,
                parent,
                children: Vec::new(),
                depth,
            });
            match parent {
                Some(p) => forest.nodes[p].children.push(id),
                None => roots.push(id),
            }
            forest.node_of_event[event] = Some(id);
            stack.push(id);
        }
        forest.roots.insert(thread_id, roots);
    }

    if offenders.is_empty() {
        Ok(forest)
    } else {
        Err(IngestError::Structure { offenders })
    }
}
