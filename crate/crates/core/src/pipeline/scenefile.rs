//! Scene file: a line-oriented text header, then little-endian f32 blocks,
//! then a u64 FNV-1a checksum of every preceding byte.
//!
//! ```text
//! scenedyn-scene 1
//! initial <n> colors <0|1>
//! views <v>
//! view <id> points <n> colors <0|1> flows <m> size <w> <h> intrinsics <fx> <fy> <cx> <cy> pose <12 numbers>
//! meta <key> <value…>
//! data
//! ```
//!
//! `view` lines appear exactly `v` times; `meta` lines are optional. Blocks
//! follow the `data` line in header order: initial positions (3n) and colors
//! (3n, if flagged), then per view point positions, point colors, flow
//! positions (3m) and flow vectors (3m). The pose is the world-to-camera
//! `[R | t]`, row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::world::{FlowInput, ViewRecord};
use crate::alignment::FlowSampleSet;
use crate::geometry::{PinholeCamera, PointCloud, Pose, Vec3};
use crate::synthscene::SyntheticScene;
use crate::wire::{fnv1a64, Reader, ShortRead, Writer};

pub const SCENE_MAGIC_LINE: &str = "scenedyn-scene";
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a scene file")]
    BadMagic,
    #[error("scene format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("byte offset {offset}: {message}")]
    Binary { offset: usize, message: String },
    #[error("scene file truncated: needs {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("scene checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
}

impl From<ShortRead> for SceneError {
    fn from(e: ShortRead) -> Self {
        SceneError::Truncated { needed: e.needed, available: e.available }
    }
}

/// Initial geometry plus the ordered expansion views.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneFile {
    pub initial: PointCloud,
    pub views: Vec<ViewRecord>,
    pub meta: BTreeMap<String, String>,
}

impl SceneFile {
    /// View 0's geometry is the initial scene; every view is an expansion.
    pub fn from_synthetic(scene: &SyntheticScene) -> Self {
        SceneFile {
            initial: scene.views.first().map(|v| v.points.clone()).unwrap_or_default(),
            views: scene.views.iter().map(ViewRecord::from_synthetic).collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn total_flows(&self) -> usize {
        self.views.iter().map(|v| if let FlowInput::Samples(s) = &v.flow { s.len() } else { 0 }).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, write_scene(self).map_err(|e| SceneError::Parse { line: 0, message: e })?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SceneFile, SceneError> {
        read_scene(&std::fs::read(path)?)
    }
}

fn points_f32(w: &mut Writer, ps: &[Vec3]) {
    for p in ps {
        w.f32s(&[p.x as f32, p.y as f32, p.z as f32]);
    }
}

/// Serializes a scene; pixel-flow views are lifted first.
pub fn write_scene(scene: &SceneFile) -> Result<Vec<u8>, String> {
    let mut flows = Vec::with_capacity(scene.views.len());
    for v in &scene.views {
        flows.push(v.samples().map_err(|e| e.to_string())?);
    }
    for (k, v) in scene.meta.iter() {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(format!("meta entry {k:?} cannot be written"));
        }
    }
    let mut h = String::new();
    let flag = |c: &Option<Vec<[f32; 3]>>| c.is_some() as u8;
    writeln!(h, "{SCENE_MAGIC_LINE} {SCENE_FORMAT_VERSION}").unwrap();
    writeln!(h, "initial {} colors {}", scene.initial.len(), flag(&scene.initial.colors)).unwrap();
    writeln!(h, "views {}", scene.views.len()).unwrap();
    for (v, f) in scene.views.iter().zip(&flows) {
        let c = &v.camera;
        let pose: Vec<String> = c.pose.to_matrix_3x4().iter().map(|x| x.to_string()).collect();
        writeln!(
            h,
            "view {} points {} colors {} flows {} size {} {} intrinsics {} {} {} {} pose {}",
            v.view_id,
            v.points.len(),
            flag(&v.points.colors),
            f.len(),
            c.width,
            c.height,
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            pose.join(" ")
        )
        .unwrap();
    }
    for (k, v) in &scene.meta {
        writeln!(h, "meta {k} {v}").unwrap();
    }
    writeln!(h, "data").unwrap();

    let mut w = Writer { buf: h.into_bytes() };
    let colors = |w: &mut Writer, c: &Option<Vec<[f32; 3]>>| {
        for c in c.iter().flatten() {
            w.f32s(c);
        }
    };
    points_f32(&mut w, &scene.initial.positions);
    colors(&mut w, &scene.initial.colors);
    for (v, f) in scene.views.iter().zip(&flows) {
        points_f32(&mut w, &v.points.positions);
        colors(&mut w, &v.points.colors);
        points_f32(&mut w, &f.positions);
        points_f32(&mut w, &f.vectors);
    }
    w.seal();
    Ok(w.buf)
}

struct ViewHeader {
    view_id: u32,
    points: usize,
    colors: bool,
    flows: usize,
    camera: PinholeCamera,
}

struct Tokens<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Tokens<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, SceneError> {
        Err(SceneError::Parse { line: self.line, message: message.into() })
    }

    fn next(&mut self, what: &str) -> Result<&'a str, SceneError> {
        match self.it.next() {
            Some(t) => Ok(t),
            None => self.err(format!("missing {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), SceneError> {
        let t = self.next(kw)?;
        if t != kw {
            return self.err(format!("expected `{kw}`, found `{t}`"));
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, SceneError> {
        let t = self.next(what)?;
        match t.parse() {
            Ok(v) => Ok(v),
            Err(_) => self.err(format!("bad {what} `{t}`")),
        }
    }

    fn flag(&mut self, what: &str) -> Result<bool, SceneError> {
        match self.parse::<u8>(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => self.err(format!("{what} flag must be 0 or 1, found {v}")),
        }
    }

    fn end(&mut self) -> Result<(), SceneError> {
        match self.it.next() {
            Some(t) => self.err(format!("unexpected `{t}`")),
            None => Ok(()),
        }
    }
}

pub fn read_scene(data: &[u8]) -> Result<SceneFile, SceneError> {
    // Header lines run up to and including the `data` line.
    let mut lines = Vec::new();
    let mut start = 0;
    let body = loop {
        let Some(nl) = data[start..].iter().position(|&b| b == b'\n') else {
            if lines.is_empty() {
                return Err(SceneError::BadMagic);
            }
            return Err(SceneError::Parse {
                line: lines.len() + 1,
                message: "header ends without a `data` line".into(),
            });
        };
        let text = std::str::from_utf8(&data[start..start + nl]).map_err(|_| SceneError::Parse {
            line: lines.len() + 1,
            message: "header is not UTF-8".into(),
        })?;
        start += nl + 1;
        if lines.is_empty() {
            let mut t = text.split_whitespace();
            if t.next() != Some(SCENE_MAGIC_LINE) {
                return Err(SceneError::BadMagic);
            }
            let found: u32 = t
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or(SceneError::Parse { line: 1, message: "missing format version".into() })?;
            if found != SCENE_FORMAT_VERSION {
                return Err(SceneError::VersionMismatch { found, expected: SCENE_FORMAT_VERSION });
            }
        }
        if text == "data" {
            break start;
        }
        lines.push(text);
    };

    let tok = |i: usize| Tokens { line: i + 1, it: lines[i].split_whitespace() };
    if lines.len() < 3 {
        return Err(SceneError::Parse { line: lines.len() + 1, message: "header too short".into() });
    }
    let mut t = tok(1);
    t.keyword("initial")?;
    let n_initial: usize = t.parse("initial count")?;
    t.keyword("colors")?;
    let initial_colors = t.flag("colors")?;
    t.end()?;
    let mut t = tok(2);
    t.keyword("views")?;
    let n_views: usize = t.parse("view count")?;
    t.end()?;
    if lines.len() < 3 + n_views {
        return Err(SceneError::Parse {
            line: lines.len() + 1,
            message: format!("expected {n_views} view lines"),
        });
    }

    let mut headers = Vec::with_capacity(n_views);
    for i in 3..3 + n_views {
        let mut t = tok(i);
        t.keyword("view")?;
        let view_id = t.parse("view id")?;
        t.keyword("points")?;
        let points = t.parse("point count")?;
        t.keyword("colors")?;
        let colors = t.flag("colors")?;
        t.keyword("flows")?;
        let flows = t.parse("flow count")?;
        t.keyword("size")?;
        let (width, height) = (t.parse("width")?, t.parse("height")?);
        t.keyword("intrinsics")?;
        let (fx, fy, cx, cy) = (t.parse("fx")?, t.parse("fy")?, t.parse("cx")?, t.parse("cy")?);
        t.keyword("pose")?;
        let mut m = [0.0f64; 12];
        for v in m.iter_mut() {
            *v = t.parse("pose entry")?;
        }
        t.end()?;
        let camera = Pose::from_matrix_3x4(&m)
            .and_then(|pose| PinholeCamera::new(fx, fy, cx, cy, width, height, pose))
            .map_err(|e| SceneError::Parse { line: i + 1, message: e.to_string() })?;
        headers.push(ViewHeader { view_id, points, colors, flows, camera });
    }

    let mut meta = BTreeMap::new();
    for i in 3 + n_views..lines.len() {
        let mut t = tok(i);
        t.keyword("meta")?;
        let key = t.next("meta key")?.to_string();
        let value = lines[i].trim_start()["meta".len()..].trim_start()[key.len()..].trim().to_string();
        meta.insert(key, value);
    }

    // Sizes are checked before any block is read so a short file reports the
    // full expected length.
    let floats = |n: usize, colors: bool| n * 3 * (1 + colors as usize);
    let mut total = floats(n_initial, initial_colors);
    for h in &headers {
        total += floats(h.points, h.colors) + h.flows * 6;
    }
    let needed = body + total * 4 + 8;
    if data.len() < needed {
        return Err(SceneError::Truncated { needed, available: data.len() });
    }
    let stored = u64::from_le_bytes(data[needed - 8..needed].try_into().expect("8 bytes"));
    let computed = fnv1a64(&data[..needed - 8]);
    if stored != computed {
        return Err(SceneError::ChecksumMismatch { stored, computed });
    }
    if data.len() > needed {
        return Err(SceneError::Binary {
            offset: needed,
            message: format!("{} trailing bytes", data.len() - needed),
        });
    }

    let mut r = Reader::new(&data[..needed - 8]);
    r.take(body)?;
    let read_points = |r: &mut Reader, n: usize| -> Result<Vec<Vec3>, SceneError> {
        let offset = r.position();
        let flat = r.f32s(3 * n)?;
        let pts: Vec<Vec3> =
            flat.chunks_exact(3).map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
        if let Some(k) = pts.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::Binary { offset: offset + 12 * k, message: "non-finite value".into() });
        }
        Ok(pts)
    };
    let read_colors =
        |r: &mut Reader, n: usize, present: bool| -> Result<Option<Vec<[f32; 3]>>, SceneError> {
            if !present {
                return Ok(None);
            }
            Ok(Some(r.f32s(3 * n)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
        };

    let positions = read_points(&mut r, n_initial)?;
    let colors = read_colors(&mut r, n_initial, initial_colors)?;
    let initial = PointCloud { positions, colors };
    let mut views = Vec::with_capacity(headers.len());
    for h in headers {
        let positions = read_points(&mut r, h.points)?;
        let colors = read_colors(&mut r, h.points, h.colors)?;
        let flow_positions = read_points(&mut r, h.flows)?;
        let flow_vectors = read_points(&mut r, h.flows)?;
        let ids = vec![h.view_id; h.flows];
        views.push(ViewRecord {
            view_id: h.view_id,
            camera: h.camera,
            points: PointCloud { positions, colors },
            flow: FlowInput::Samples(FlowSampleSet {
                positions: flow_positions,
                vectors: flow_vectors,
                view_ids: ids,
            }),
        });
    }
    Ok(SceneFile { initial, views, meta })
}
