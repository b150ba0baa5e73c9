use super::{EventCategory, FieldMapping, IngestError, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeWindow {
    pub start_us: i64,
    pub end_us: i64,
}

impl TimeWindow {
    pub fn new(start_us: i64, end_us: i64) -> Self {
        Self { start_us, end_us }
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start_us <= t && t <= self.end_us
    }

    pub fn contains_window(&self, other: &TimeWindow) -> bool {
        self.start_us <= other.start_us && other.end_us <= self.end_us
    }
}

/// Where an annotation window sits relative to the iteration windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    PreIteration,
    /// 0-based index into [`AnnotationIndex::iteration_boundaries`].
    Iteration(usize),
    /// Starts between iterations or after the last one.
    Unplaced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AnnotatedWindow {
    pub window: TimeWindow,
    pub placement: Placement,
    pub event: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationIndex {
    pub iteration_boundaries: Vec<TimeWindow>,
    pub zero_grad_windows: Vec<AnnotatedWindow>,
    pub dataloader_windows: Vec<AnnotatedWindow>,
    pub optimizer_step_windows: Vec<AnnotatedWindow>,
}

impl AnnotationIndex {
    /// Iteration whose window contains `t`. With touching boundaries the
    /// later iteration wins.
    pub fn iteration_at(&self, t: i64) -> Option<usize> {
        let upto = self
            .iteration_boundaries
            .partition_point(|w| w.start_us <= t);
        upto.checked_sub(1)
            .filter(|&i| self.iteration_boundaries[i].contains(t))
    }

    pub fn placement_of(&self, window: TimeWindow) -> Placement {
        match self.iteration_at(window.start_us) {
            Some(i) => Placement::Iteration(i),
            None if self
                .iteration_boundaries
                .first()
                .map_or(true, |first| window.start_us < first.start_us) =>
            {
                Placement::PreIteration
            }
            None => Placement::Unplaced,
        }
    }

    pub fn zero_grad_in(&self, iteration: usize) -> impl Iterator<Item = &AnnotatedWindow> {
        in_iteration(&self.zero_grad_windows, iteration)
    }

    pub fn dataloader_in(&self, iteration: usize) -> impl Iterator<Item = &AnnotatedWindow> {
        in_iteration(&self.dataloader_windows, iteration)
    }

    pub fn optimizer_step_in(&self, iteration: usize) -> impl Iterator<Item = &AnnotatedWindow> {
        in_iteration(&self.optimizer_step_windows, iteration)
    }

    pub fn in_zero_grad(&self, t: i64) -> bool {
        self.zero_grad_windows.iter().any(|w| w.window.contains(t))
    }

    pub fn in_dataloader(&self, t: i64) -> bool {
        self.dataloader_windows.iter().any(|w| w.window.contains(t))
    }

    pub fn in_optimizer_step(&self, t: i64) -> bool {
        self.optimizer_step_windows.iter().any(|w| w.window.contains(t))
    }
}

fn in_iteration(
    windows: &[AnnotatedWindow],
    iteration: usize,
) -> impl Iterator<Item = &AnnotatedWindow> {
    windows
        .iter()
        .filter(move |w| w.placement == Placement::Iteration(iteration))
}

/// Collects iteration boundaries and training-loop marker windows from
/// user annotations.
pub fn index_annotations(
    events: &[TraceEvent],
    mapping: &FieldMapping,
) -> Result<AnnotationIndex, IngestError> {
    let annotations: Vec<(usize, &TraceEvent)> = events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.category == EventCategory::UserAnnotation)
        .collect();

    let mut iterations: Vec<(usize, TimeWindow)> = annotations
        .iter()
        .filter(|(_, e)| mapping.is_iteration_marker(&e.name))
        .map(|&(i, e)| (i, TimeWindow::new(e.start_us, e.end_us())))
        .collect();
    iterations.sort_by_key(|&(i, w)| (w.start_us, w.end_us, i));
    for pair in iterations.windows(2) {
        if pair[1].1.start_us < pair[0].1.end_us {
            return Err(IngestError::OverlappingIterations {
                first: pair[0].0,
                second: pair[1].0,
            });
        }
    }
    if iterations.len() < 2 {
        return Err(IngestError::InsufficientIterations {
            found: iterations.len(),
        });
    }

    let mut index = AnnotationIndex {
        iteration_boundaries: iterations.into_iter().map(|(_, w)| w).collect(),
        ..AnnotationIndex::default()
    };
    for &(i, e) in &annotations {
        if mapping.is_iteration_marker(&e.name) {
            continue;
        }
        let window = TimeWindow::new(e.start_us, e.end_us());
        let annotated = AnnotatedWindow {
            window,
            placement: index.placement_of(window),
            event: i,
        };
        if FieldMapping::label_matches(&mapping.zero_grad_marker, &e.name) {
            index.zero_grad_windows.push(annotated);
        } else if FieldMapping::label_matches(&mapping.dataloader_marker, &e.name) {
            index.dataloader_windows.push(annotated);
        } else if FieldMapping::label_matches(&mapping.optimizer_step_marker, &e.name) {
            index.optimizer_step_windows.push(annotated);
        }
    }
    Ok(index)
}
