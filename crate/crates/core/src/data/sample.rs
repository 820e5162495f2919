use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled example: an `[h, w, c]` image grid in `[0, 1]` and a bag of
/// token ids. An absent modality has its flag cleared and is stored as an
/// empty bag or an all-zero grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRecord", into = "SampleRecord")]
pub struct ModalitySample {
    pub image: Tensor,
    pub tokens: Vec<u32>,
    pub label: usize,
    pub text_present: bool,
    pub image_present: bool,
}

impl ModalitySample {
    pub fn new(image: Tensor, tokens: Vec<u32>, label: usize) -> Self {
        let text_present = !tokens.is_empty();
        ModalitySample {
            image,
            tokens,
            label,
            text_present,
            image_present: true,
        }
    }

    pub fn drop_text(&mut self) {
        self.tokens.clear();
        self.text_present = false;
    }

    pub fn drop_image(&mut self) {
        self.image.values_mut().iter_mut().for_each(|v| *v = 0.0);
        self.image_present = false;
    }

    /// Check the flag/content correspondence and the label range.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.label >= classes {
            return Err(Error::config(
                "label",
                format!("{} is not below class count {classes}", self.label),
            ));
        }
        if self.text_present == self.tokens.is_empty() {
            return Err(Error::config("flags.text_present", "disagrees with token bag"));
        }
        let zero = self.image.values().iter().all(|&v| v == 0.0);
        if !self.image_present && !zero {
            return Err(Error::config("flags.image_present", "absent image must be all zeros"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    dims: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FlagsRecord {
    text_present: bool,
    image_present: bool,
}

/// Wire form of one JSON-lines record.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    label: usize,
    image: ImageRecord,
    tokens: Vec<u32>,
    flags: FlagsRecord,
}

impl From<ModalitySample> for SampleRecord {
    fn from(s: ModalitySample) -> Self {
        SampleRecord {
            label: s.label,
            image: ImageRecord {
                dims: s.image.dims().to_vec(),
                values: s.image.into_values(),
            },
            tokens: s.tokens,
            flags: FlagsRecord {
                text_present: s.text_present,
                image_present: s.image_present,
            },
        }
    }
}

impl TryFrom<SampleRecord> for ModalitySample {
    type Error = crate::tensor::TensorError;
    fn try_from(r: SampleRecord) -> std::result::Result<Self, Self::Error> {
        Ok(ModalitySample {
            image: Tensor::build(r.image.dims, r.image.values)?,
            tokens: r.tokens,
            label: r.label,
            text_present: r.flags.text_present,
            image_present: r.flags.image_present,
        })
    }
}
