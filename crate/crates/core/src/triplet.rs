use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(reference, instruction, target)`: one composed-retrieval supervision unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_id: String,
    pub reference_id: String,
    pub instruction: String,
    pub target_id: String,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.reference_id == self.target_id {
            return Err(Error::Data(format!(
                "query {} uses its reference as target",
                self.query_id
            )));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::Data(format!("query {} has an empty instruction", self.query_id)));
        }
        Ok(())
    }
}
