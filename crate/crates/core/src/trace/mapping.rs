use serde::{Deserialize, Serialize};

use super::EventCategory;

/// Category strings for the four record kinds the estimator consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CategoryNames {
    pub python_function: String,
    pub user_annotation: String,
    pub cpu_op: String,
    pub cpu_instant: String,
}

impl Default for CategoryNames {
    fn default() -> Self {
        Self {
            python_function: "python_function".into(),
            user_annotation: "user_annotation".into(),
            cpu_op: "cpu_op".into(),
            cpu_instant: "cpu_instant_event".into(),
        }
    }
}

impl CategoryNames {
    pub fn classify(&self, category: &str) -> Option<EventCategory> {
        if category == self.python_function {
            Some(EventCategory::PythonFunction)
        } else if category == self.user_annotation {
            Some(EventCategory::UserAnnotation)
        } else if category == self.cpu_op {
            Some(EventCategory::CpuOp)
        } else if category == self.cpu_instant {
            Some(EventCategory::CpuInstant)
        } else {
            None
        }
    }
}

/// Key names and annotation labels used to read a trace.
///
/// Profiler schemas drift between versions, so every key is overridable. The
/// defaults match the PyTorch profiler's Chrome-trace export. Annotation
/// labels match case-insensitively: the iteration marker as a name prefix,
/// the other three as substrings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub events_key: String,
    pub category_key: String,
    pub name_key: String,
    pub timestamp_key: String,
    pub duration_key: String,
    pub thread_key: String,
    pub args_key: String,
    pub address_key: String,
    pub bytes_key: String,
    pub device_key: String,
    pub total_allocated_key: String,
    pub sequence_key: String,
    pub categories: CategoryNames,
    pub iteration_marker: String,
    pub zero_grad_marker: String,
    pub dataloader_marker: String,
    pub optimizer_step_marker: String,
    /// Device whose memory instants are kept. `None` picks the device of the
    /// first memory instant in file order.
    pub target_device: Option<i64>,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            events_key: "traceEvents".into(),
            category_key: "cat".into(),
            name_key: "name".into(),
            timestamp_key: "ts".into(),
            duration_key: "dur".into(),
            thread_key: "tid".into(),
            args_key: "args".into(),
            address_key: "Addr".into(),
            bytes_key: "Bytes".into(),
            device_key: "Device Id".into(),
            total_allocated_key: "Total Allocated".into(),
            sequence_key: "Sequence number".into(),
            categories: CategoryNames::default(),
            iteration_marker: "ProfilerStep#".into(),
            zero_grad_marker: "zero_grad".into(),
            dataloader_marker: "__next__".into(),
            optimizer_step_marker: "optimizer.step".into(),
            target_device: None,
        }
    }
}

impl FieldMapping {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let mapping: FieldMapping = toml::from_str(text).map_err(|e| e.to_string())?;
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<(), String> {
        let keys = [
            ("events_key", &self.events_key),
            ("category_key", &self.category_key),
            ("name_key", &self.name_key),
            ("timestamp_key", &self.timestamp_key),
            ("duration_key", &self.duration_key),
            ("thread_key", &self.thread_key),
            ("args_key", &self.args_key),
            ("address_key", &self.address_key),
            ("bytes_key", &self.bytes_key),
            ("device_key", &self.device_key),
            ("total_allocated_key", &self.total_allocated_key),
            ("sequence_key", &self.sequence_key),
            ("categories.python_function", &self.categories.python_function),
            ("categories.user_annotation", &self.categories.user_annotation),
            ("categories.cpu_op", &self.categories.cpu_op),
            ("categories.cpu_instant", &self.categories.cpu_instant),
            ("iteration_marker", &self.iteration_marker),
            ("zero_grad_marker", &self.zero_grad_marker),
            ("dataloader_marker", &self.dataloader_marker),
            ("optimizer_step_marker", &self.optimizer_step_marker),
        ];
        if let Some((key, _)) = keys.iter().find(|(_, v)| v.is_empty()) {
            return Err(format!("{key} must not be empty"));
        }
        let labels = self.annotation_labels();
        for (i, a) in labels.iter().enumerate() {
            if labels[i + 1..].iter().any(|b| b == a) {
                return Err(format!("annotation label \"{a}\" is used twice"));
            }
        }
        let c = &self.categories;
        let cats = [&c.python_function, &c.user_annotation, &c.cpu_op, &c.cpu_instant];
        for (i, a) in cats.iter().enumerate() {
            if cats[i + 1..].contains(a) {
                return Err(format!("category \"{a}\" is mapped twice"));
            }
        }
        Ok(())
    }

    fn annotation_labels(&self) -> [String; 4] {
        [
            self.iteration_marker.to_lowercase(),
            self.zero_grad_marker.to_lowercase(),
            self.dataloader_marker.to_lowercase(),
            self.optimizer_step_marker.to_lowercase(),
        ]
    }

    pub(crate) fn is_iteration_marker(&self, name: &str) -> bool {
        name.len() >= self.iteration_marker.len()
            && name
                .get(..self.iteration_marker.len())
                .is_some_and(|p| p.eq_ignore_ascii_case(&self.iteration_marker))
    }

    pub(crate) fn label_matches(label: &str, name: &str) -> bool {
        name.to_lowercase().contains(&label.to_lowercase())
    }
}
