//! Declarative scene edits: insert, delete, replace, recolor.

use serde::{Deserialize, Serialize};

use super::{Primitive, SceneSpec};
use crate::error::{Error, Result};

/// Per-channel affine color map, clamped back into [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteMap {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl PaletteMap {
    pub fn identity() -> PaletteMap {
        PaletteMap { scale: [1.0; 3], offset: [0.0; 3] }
    }

    pub fn apply(&self, color: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = (color[ch] * self.scale[ch] + self.offset[ch]).clamp(0.0, 1.0);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        for v in self.scale.iter().chain(self.offset.iter()) {
            if !v.is_finite() {
                return Err(Error::Edit("palette map has non-finite entries".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum EditSpec {
    /// Add a primitive; its tag must not collide with an existing one.
    Insert { primitive: Primitive },
    /// Remove the primitive carrying `target_tag`.
    Delete { target_tag: String },
    /// Swap the primitive carrying `target_tag` for a new one.
    Replace { target_tag: String, primitive: Primitive },
    /// Push every primitive color through the palette map.
    RecolorAll { palette: PaletteMap },
}

/// Applies the edit to a copy of the scene; the input scene is untouched.
pub fn apply_edit(scene: &SceneSpec, edit: &EditSpec) -> Result<SceneSpec> {
    scene.validate()?;
    let mut out = scene.clone();
    match edit {
        EditSpec::Insert { primitive } => {
            primitive.validate()?;
            if scene.primitive(&primitive.tag).is_some() {
                return Err(Error::Edit(format!(
                    "insert would duplicate tag '{}'",
                    primitive.tag
                )));
            }
            out.primitives.push(primitive.clone());
        }
        EditSpec::Delete { target_tag } => {
            let idx = index_of(scene, target_tag)?;
            out.primitives.remove(idx);
            if out.primitives.is_empty() {
                return Err(Error::Edit("delete would leave an empty scene".into()));
            }
        }
        EditSpec::Replace { target_tag, primitive } => {
            primitive.validate()?;
            let idx = index_of(scene, target_tag)?;
            if primitive.tag != *target_tag && scene.primitive(&primitive.tag).is_some() {
                return Err(Error::Edit(format!(
                    "replacement tag '{}' already exists",
                    primitive.tag
                )));
            }
            out.primitives[idx] = primitive.clone();
        }
        EditSpec::RecolorAll { palette } => {
            palette.validate()?;
            for p in &mut out.primitives {
                p.color = palette.apply(p.color);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

fn index_of(scene: &SceneSpec, tag: &str) -> Result<usize> {
    scene
        .primitives
        .iter()
        .position(|p| p.tag == tag)
        .ok_or_else(|| Error::EditTarget { tag: tag.to_string() })
}
