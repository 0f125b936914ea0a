use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ActionError, ActionKind, FiniteGroup, GroupAction, GroupError};

/// JSON form of a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupSpec {
    Cyclic { n: usize },
    Product { a: Box<GroupSpec>, b: Box<GroupSpec> },
    Table { cayley: Vec<Vec<usize>> },
}

impl GroupSpec {
    pub fn build(&self) -> Result<FiniteGroup, GroupError> {
        match self {
            GroupSpec::Cyclic { n } => FiniteGroup::cyclic(*n),
            GroupSpec::Product { a, b } => Ok(FiniteGroup::product(&a.build()?, &b.build()?)),
            GroupSpec::Table { cayley } => FiniteGroup::from_table("table", cayley.clone()),
        }
    }
}

/// An action written either as a bare name (`"rot90_image"`) or as an object
/// carrying parameters (`{"kind":"token_swap","pairs":[[3,4]]}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionSpec {
    Name(String),
    Full(ActionKind),
}

impl ActionSpec {
    pub fn kind(&self) -> Result<ActionKind, ActionError> {
        match self {
            ActionSpec::Full(k) => Ok(k.clone()),
            ActionSpec::Name(name) => match name.as_str() {
                "trivial" => Ok(ActionKind::Trivial),
                "rot90_image" => Ok(ActionKind::Rot90Image),
                "hflip_image" => Ok(ActionKind::HflipImage),
                "negate" => Ok(ActionKind::Negate),
                "plane_rot90" => Ok(ActionKind::PlaneRot90),
                other => Err(ActionError::Invalid(format!(
                    "action {other:?} needs parameters or is unknown"
                ))),
            },
        }
    }
}

impl From<ActionKind> for ActionSpec {
    fn from(k: ActionKind) -> Self {
        ActionSpec::Full(k)
    }
}

/// `{"group": {...}, "input_action": ..., "output_action": ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupDescriptor {
    pub group: GroupSpec,
    pub input_action: ActionSpec,
    pub output_action: ActionSpec,
}

impl GroupDescriptor {
    pub fn from_json(text: &str) -> Result<Self, ActionError> {
        serde_json::from_str(text).map_err(|e| ActionError::Invalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }

    /// Builds the shared group and both actions over it.
    pub fn build(&self) -> Result<(GroupAction, GroupAction), ActionError> {
        let group = Arc::new(self.group.build().map_err(|e| ActionError::Invalid(e.to_string()))?);
        let input = GroupAction::new(Arc::clone(&group), self.input_action.kind()?)?;
        let output = GroupAction::new(group, self.output_action.kind()?)?;
        Ok((input, output))
    }
}
