use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a stored tensor. Batch-norm running statistics are buffers: the
/// optimizer never touches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    PRelu,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamKind::BnScale | ParamKind::BnShift | ParamKind::BnMean | ParamKind::BnVar
        )
    }

    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::PRelu => 2,
            ParamKind::BnScale => 3,
            ParamKind::BnShift => 4,
            ParamKind::BnMean => 5,
            ParamKind::BnVar => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::PRelu,
            3 => ParamKind::BnScale,
            4 => ParamKind::BnShift,
            5 => ParamKind::BnMean,
            6 => ParamKind::BnVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub group: String,
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat parameter storage. Every tensor belongs to a named group
/// (e.g. `encoder.stage1`), which is the unit of checkpoint transfer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, group: &str, name: &str, kind: ParamKind, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            group: group.to_string(),
            name: name.to_string(),
            kind,
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, group: &str, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.group == group && e.name == name)
            .map(ParamId)
    }

    /// Group names in first-insertion order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.iter().any(|g| g == &e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Number of scalar values, buffers excluded.
    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.kind.is_buffer())
            .map(|e| e.value.numel())
            .sum()
    }
}
