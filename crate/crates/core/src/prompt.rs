//! Toy prompt vocabulary: `<color> <shape> <action>` slots over fixed word lists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth_data::{Shape, TrajectoryKind};

/// Named sprite colors and their RGB values.
pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.35, 0.95]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.90, 0.20, 0.85]),
    ("cyan", [0.10, 0.85, 0.90]),
    ("orange", [1.00, 0.55, 0.10]),
    ("white", [0.95, 0.95, 0.95]),
];

pub const NULL_TOKEN: usize = 0;
pub const PROMPT_LEN: usize = 3;

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// One parsed prompt; any slot may be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub color: Option<String>,
    pub shape: Option<Shape>,
    pub action: Option<TrajectoryKind>,
}

impl Prompt {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Prompt::default();
        for word in text.split_whitespace() {
            let w = word.to_ascii_lowercase();
            if color_rgb(&w).is_some() {
                p.color = Some(w);
            } else if let Ok(s) = w.parse::<Shape>() {
                p.shape = Some(s);
            } else if let Ok(k) = w.parse::<TrajectoryKind>() {
                p.action = Some(k);
            } else {
                return Err(Error::Config(format!("unknown prompt word {word:?}")));
            }
        }
        Ok(p)
    }

    pub fn without_action(&self) -> Self {
        Prompt {
            action: None,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        let mut words = Vec::new();
        if let Some(c) = &self.color {
            words.push(c.clone());
        }
        if let Some(s) = self.shape {
            words.push(s.to_string());
        }
        if let Some(a) = self.action {
            words.push(a.to_string());
        }
        words.join(" ")
    }

    /// Token ids in slot order; empty slots map to [`NULL_TOKEN`].
    pub fn token_ids(&self) -> [usize; PROMPT_LEN] {
        let color = self
            .color
            .as_deref()
            .and_then(|c| COLORS.iter().position(|(n, _)| *n == c))
            .map_or(NULL_TOKEN, |i| 1 + i);
        let shape = self
            .shape
            .map_or(NULL_TOKEN, |s| 1 + COLORS.len() + s.index());
        let action = self.action.map_or(NULL_TOKEN, |k| {
            1 + COLORS.len() + Shape::ALL.len() + k.index()
        });
        [color, shape, action]
    }
}

pub fn vocab_size() -> usize {
    1 + COLORS.len() + Shape::ALL.len() + TrajectoryKind::ALL.len()
}
