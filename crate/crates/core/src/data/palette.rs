//! Class colour palettes for label images and rendered predictions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaletteEntry {
    pub id: u8,
    pub rgb: [u8; 3],
    pub name: String,
}

/// Ordered classes with unique colours and ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
    /// Colour mapped to and from [`IGNORE_LABEL`].
    pub ignore_rgb: Option<[u8; 3]>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>, ignore_rgb: Option<[u8; 3]>) -> Result<Self> {
        if entries.is_empty() || entries.len() > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("palette needs 1..=255 classes, got {}", entries.len())));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Config(format!(
                    "palette ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
        }
        let mut colours: Vec<[u8; 3]> = entries.iter().map(|e| e.rgb).chain(ignore_rgb).collect();
        colours.sort();
        if colours.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("palette colours must be unique".into()));
        }
        Ok(Palette { entries, ignore_rgb })
    }

    fn from_table(table: &[(&str, [u8; 3])]) -> Self {
        let entries = table
            .iter()
            .enumerate()
            .map(|(i, (name, rgb))| PaletteEntry {
                id: i as u8,
                rgb: *rgb,
                name: name.to_string(),
            })
            .collect();
        Palette::new(entries, None).expect("builtin palette is valid")
    }

    /// ISPRS convention; clutter is the last class.
    pub fn vaihingen() -> Self {
        Self::from_table(&[
            ("impervious_surface", [255, 255, 255]),
            ("building", [0, 0, 255]),
            ("low_vegetation", [0, 255, 255]),
            ("tree", [0, 255, 0]),
            ("car", [255, 255, 0]),
            ("clutter", [255, 0, 0]),
        ])
    }

    pub fn loveda() -> Self {
        Self::from_table(&[
            ("background", [255, 255, 255]),
            ("building", [255, 0, 0]),
            ("road", [255, 255, 0]),
            ("water", [0, 0, 255]),
            ("barren", [159, 129, 183]),
            ("forest", [0, 255, 0]),
            ("agriculture", [255, 195, 128]),
        ])
    }

    /// A builtin palette and its evaluated classes: Vaihingen scores the
    /// five foreground classes, LoveDA all seven.
    pub fn builtin(name: &str) -> Option<(Self, Vec<usize>)> {
        match name {
            "vaihingen" => Some((Self::vaihingen(), (0..5).collect())),
            "loveda" => Some((Self::loveda(), (0..7).collect())),
            _ => None,
        }
    }

    /// Lines of `id R G B name`, or `ignore R G B`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut ignore = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("palette line {}: `{line}`", n + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 4 {
                return Err(bad());
            }
            let mut rgb = [0u8; 3];
            for (c, p) in rgb.iter_mut().zip(&parts[1..4]) {
                *c = p.parse().map_err(|_| bad())?;
            }
            if parts[0] == "ignore" {
                ignore = Some(rgb);
                continue;
            }
            entries.push(PaletteEntry {
                id: parts[0].parse().map_err(|_| bad())?,
                rgb,
                name: parts.get(4..).map(|p| p.join(" ")).filter(|s| !s.is_empty()).ok_or_else(bad)?,
            });
        }
        entries.sort_by_key(|e| e.id);
        Palette::new(entries, ignore)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Exact colour match to class id; anything else is [`IGNORE_LABEL`].
    pub fn labels_from_rgb(&self, width: usize, height: usize, rgb: &[u8]) -> Result<LabelMap> {
        let lut: HashMap<[u8; 3], u8> = self.entries.iter().map(|e| (e.rgb, e.id)).collect();
        let ids = rgb
            .chunks_exact(3)
            .map(|p| *lut.get(&[p[0], p[1], p[2]]).unwrap_or(&IGNORE_LABEL))
            .collect();
        LabelMap::new(height, width, ids)
    }

    /// Same as [`Self::labels_from_rgb`] for `[H, W, 3]` values in `[0, 1]`.
    pub fn labels_from_color(&self, img: &Tensor<f32>) -> Result<LabelMap> {
        let (h, w, _) = img.dims3("labels_from_color")?;
        self.labels_from_rgb(w, h, &super::image::to_rgb8(img)?)
    }

    /// Render ids as RGB bytes. Ids without a colour (including
    /// [`IGNORE_LABEL`] when no ignore colour is set) become black.
    pub fn colors_from_labels(&self, labels: &LabelMap) -> Vec<u8> {
        let ignore = self.ignore_rgb.unwrap_or([0, 0, 0]);
        labels
            .ids()
            .iter()
            .flat_map(|&id| self.entries.get(id as usize).map_or(ignore, |e| e.rgb))
            .collect()
    }
}
