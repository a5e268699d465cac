use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Result};

const MAGIC: &str = "TOYIMG v1";

/// Ground truth of a generated scene.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub object: String,
    pub count: usize,
    pub color: String,
    pub background: String,
}

/// Row-major `H×W×C` grid of values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub grid: Vec<f32>,
    pub attributes: SceneAttributes,
}

impl ToyImage {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            grid: vec![0.0; height * width * channels],
            attributes: SceneAttributes::default(),
        }
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let at = (y * self.width + x) * self.channels;
        &mut self.grid[at..at + self.channels]
    }

    /// Text form: `TOYIMG v1 H W C`, then one line of values per image row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {} {} {}\n", self.height, self.width, self.channels);
        for row in self.grid.chunks(self.width * self.channels) {
            let mut first = true;
            for v in row {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut tokens = text.split_whitespace();
        let (a, b) = (tokens.next(), tokens.next());
        if a != Some("TOYIMG") || b != Some("v1") {
            return Err(format!("missing `{MAGIC}` header"));
        }
        let mut dim = |name: &str| -> std::result::Result<usize, String> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .filter(|&d: &usize| d > 0)
                .ok_or_else(|| format!("bad {name} in header"))
        };
        let (h, w, c) = (dim("H")?, dim("W")?, dim("C")?);
        let grid: Vec<f32> = tokens
            .map(|t| t.parse::<f32>().map_err(|e| format!("bad value `{t}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if grid.len() != h * w * c {
            return Err(format!("expected {} values, found {}", h * w * c, grid.len()));
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("values must lie in [0, 1]".into());
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            grid,
            attributes: SceneAttributes::default(),
        })
    }

    pub fn attributes_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".attrs.json");
        PathBuf::from(s)
    }

    /// Writes the grid and, next to it, the scene attributes as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| DataError::io(path, e))?;
        let attrs = Self::attributes_path(path);
        let json = serde_json::to_string(&self.attributes).expect("plain struct");
        std::fs::write(&attrs, json).map_err(|e| DataError::io(attrs, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(DataError::MissingImage(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let mut img = Self::from_text(&text).map_err(|msg| DataError::ImageFormat {
            path: path.to_path_buf(),
            msg,
        })?;
        let attrs = Self::attributes_path(path);
        if attrs.exists() {
            let json = std::fs::read_to_string(&attrs).map_err(|e| DataError::io(&attrs, e))?;
            img.attributes = serde_json::from_str(&json).map_err(|e| DataError::ImageFormat {
                path: attrs,
                msg: e.to_string(),
            })?;
        }
        Ok(img)
    }
}
