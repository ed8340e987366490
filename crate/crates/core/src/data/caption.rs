//! Template grammar for shape-world captions and its inverse parser.
//!
//! ```text
//! caption    := group ("and" group)* "on a" style bg-color "background"
//! group      := count color shape position
//! count      := "a" | "two" | "three" | ...
//! position   := "on the left" | "in the middle" | "on the right"
//! style      := "flat" | "striped"
//! ```
//!
//! Objects sharing `(position, shape, color)` form one group whose count is
//! spelled out; the shape word is pluralized for counts above one.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const SHAPE_NAMES: [&str; 6] = ["circle", "square", "triangle", "diamond", "cross", "ring"];
const SHAPE_PLURALS: [&str; 6] = ["circles", "squares", "triangles", "diamonds", "crosses", "rings"];
pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const BACKGROUND_NAMES: [&str; 3] = ["gray", "white", "black"];
const COUNT_WORDS: [&str; 10] = [
    "zero", "a", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Left,
    Middle,
    Right,
}

impl Region {
    /// Coarse horizontal region of a normalized x coordinate (thirds).
    pub fn of(center_x: f64) -> Region {
        if center_x < 1.0 / 3.0 {
            Region::Left
        } else if center_x < 2.0 / 3.0 {
            Region::Middle
        } else {
            Region::Right
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Region::Left => "on the left",
            Region::Middle => "in the middle",
            Region::Right => "on the right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundStyle {
    Flat,
    Striped,
}

/// One group of identical objects in the same region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupFact {
    pub region: Region,
    pub shape: usize,
    pub color: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionFacts {
    /// Sorted by `(region, shape, color)`.
    pub groups: Vec<GroupFact>,
    pub style: BackgroundStyle,
    pub background: usize,
}

impl CaptionFacts {
    /// Groups per-object `(region, shape, color)` triples into counted facts.
    pub fn from_objects(
        objects: &[(Region, usize, usize)],
        style: BackgroundStyle,
        background: usize,
    ) -> Self {
        let mut keys: Vec<(Region, usize, usize)> = objects.to_vec();
        keys.sort();
        let mut groups: Vec<GroupFact> = Vec::new();
        for (region, shape, color) in keys {
            match groups.last_mut() {
                Some(g) if (g.region, g.shape, g.color) == (region, shape, color) => g.count += 1,
                _ => groups.push(GroupFact {
                    region,
                    shape,
                    color,
                    count: 1,
                }),
            }
        }
        CaptionFacts {
            groups,
            style,
            background,
        }
    }

    pub fn total_objects(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    pub fn render(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        for g in &self.groups {
            let noun = if g.count == 1 {
                SHAPE_NAMES[g.shape]
            } else {
                SHAPE_PLURALS[g.shape]
            };
            parts.push(format!(
                "{} {} {} {}",
                COUNT_WORDS[g.count],
                COLOR_NAMES[g.color],
                noun,
                g.region.phrase()
            ));
        }
        let style = match self.style {
            BackgroundStyle::Flat => "flat",
            BackgroundStyle::Striped => "striped",
        };
        format!(
            "{} on a {} {} background",
            parts.join(" and "),
            style,
            BACKGROUND_NAMES[self.background]
        )
    }
}

/// Inverse of [`CaptionFacts::render`].
pub fn parse_caption(caption: &str) -> Result<CaptionFacts> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut pos = 0usize;
    let bad = |msg: String| CoreError::Caption(msg);
    let next = |pos: &mut usize| -> Result<&str> {
        let w = words
            .get(*pos)
            .copied()
            .ok_or_else(|| CoreError::Caption("unexpected end of caption".into()))?;
        *pos += 1;
        Ok(w)
    };
    let lookup = |list: &[&str], w: &str| list.iter().position(|c| *c == w);

    let mut groups = Vec::new();
    loop {
        let w = next(&mut pos)?;
        let count = lookup(&COUNT_WORDS, w)
            .filter(|&c| c > 0)
            .ok_or_else(|| bad(format!("expected a count, got `{w}`")))?;
        let w = next(&mut pos)?;
        let color = lookup(&COLOR_NAMES, w).ok_or_else(|| bad(format!("unknown color `{w}`")))?;
        let w = next(&mut pos)?;
        let shape = if count == 1 {
            lookup(&SHAPE_NAMES, w)
        } else {
            lookup(&SHAPE_PLURALS, w)
        }
        .ok_or_else(|| bad(format!("unknown shape `{w}` for count {count}")))?;
        let (a, b, c) = (next(&mut pos)?, next(&mut pos)?, next(&mut pos)?);
        let region = match (a, b, c) {
            ("on", "the", "left") => Region::Left,
            ("in", "the", "middle") => Region::Middle,
            ("on", "the", "right") => Region::Right,
            _ => return Err(bad(format!("bad position `{a} {b} {c}`"))),
        };
        groups.push(GroupFact {
            region,
            shape,
            color,
            count,
        });
        match next(&mut pos)? {
            "and" => continue,
            "on" => break,
            w => return Err(bad(format!("expected `and` or `on`, got `{w}`"))),
        }
    }
    if next(&mut pos)? != "a" {
        return Err(bad("expected `on a`".into()));
    }
    let style = match next(&mut pos)? {
        "flat" => BackgroundStyle::Flat,
        "striped" => BackgroundStyle::Striped,
        w => return Err(bad(format!("unknown background style `{w}`"))),
    };
    let w = next(&mut pos)?;
    let background =
        lookup(&BACKGROUND_NAMES, w).ok_or_else(|| bad(format!("unknown background `{w}`")))?;
    if next(&mut pos)? != "background" || pos != words.len() {
        return Err(bad("trailing words after background".into()));
    }
    Ok(CaptionFacts {
        groups,
        style,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse() {
        let facts = CaptionFacts::from_objects(
            &[
                (Region::Left, 0, 0),
                (Region::Right, 1, 2),
                (Region::Left, 0, 0),
            ],
            BackgroundStyle::Striped,
            0,
        );
        let s = facts.render();
        assert_eq!(
            s,
            "two red circles on the left and a blue square on the right on a striped gray background"
        );
        assert_eq!(parse_caption(&s).unwrap(), facts);
        assert_eq!(facts.total_objects(), 3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_caption("a red hexagon on the left on a flat gray background").is_err());
        assert!(parse_caption("two red circle on the left on a flat gray background").is_err());
        assert!(parse_caption("a red circle on the left").is_err());
    }
}
