//! On-disk formats.
//!
//! CSV: header `source_id,frame,agent{a}_kp{k}_x,agent{a}_kp{k}_y,...[,label]`
//! with zero-based agent/keypoint indices in stacked order. Frames are
//! contiguous integers per `source_id`; `label` is optional and `-1` marks an
//! unlabeled frame.
//!
//! Binary cache (little-endian):
//! ```text
//! "TRJ1"  u32 agents  u32 keypoints  f64 width  f64 height  u8 split
//! u32 trajectory_count
//! per trajectory:
//!   u32 id_len  id bytes (UTF-8)  f64 frame_rate  u8 normalized
//!   u32 frame_count  u8 has_labels
//!   frame_count * (2 * agents * keypoints) f64, row-major by frame
//!   frame_count i32 labels (only when has_labels = 1)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Dataset, FrameState, ImageDims, Layout, Split, Trajectory, TrajectoryError};

pub const BINARY_MAGIC: &[u8; 4] = b"TRJ1";

/// Column layout of a pose CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSchema {
    pub layout: Layout,
    pub has_label: bool,
    pub frame_rate: f64,
}

impl PoseSchema {
    pub fn new(layout: Layout, has_label: bool) -> Self {
        Self {
            layout,
            has_label,
            frame_rate: 30.0,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["source_id".to_string(), "frame".to_string()];
        for a in 0..self.layout.agents {
            for k in 0..self.layout.keypoints {
                h.push(format!("agent{a}_kp{k}_x"));
                h.push(format!("agent{a}_kp{k}_y"));
            }
        }
        if self.has_label {
            h.push("label".to_string());
        }
        h
    }

    /// Derive the schema from a header row.
    pub fn infer(header: &[&str]) -> Result<Self, TrajectoryError> {
        if header.len() < 4 || header[0] != "source_id" || header[1] != "frame" {
            return Err(TrajectoryError::Schema(
                "header must start with `source_id,frame`".into(),
            ));
        }
        let has_label = header.last() == Some(&"label");
        let coord_cols = &header[2..header.len() - usize::from(has_label)];
        let mut agents = 0;
        let mut keypoints = 0;
        for name in coord_cols.iter().step_by(2) {
            let (a, k) = parse_coord_name(name)
                .ok_or_else(|| TrajectoryError::Schema(format!("bad column `{name}`")))?;
            agents = agents.max(a + 1);
            keypoints = keypoints.max(k + 1);
        }
        let schema = Self::new(Layout::new(agents, keypoints), has_label);
        let expected = schema.header();
        if expected
            .iter()
            .map(String::as_str)
            .ne(header.iter().copied())
        {
            return Err(TrajectoryError::Schema(format!(
                "columns are not in stacked (agent, keypoint, x-then-y) order for {agents} agents x {keypoints} keypoints"
            )));
        }
        Ok(schema)
    }

    fn arity(&self) -> usize {
        2 + self.layout.state_dim() + usize::from(self.has_label)
    }
}

fn parse_coord_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("agent")?;
    let (a, rest) = rest.split_once("_kp")?;
    let (k, _) = rest.split_once('_')?;
    Some((a.parse().ok()?, k.parse().ok()?))
}

/// Read a pose CSV. `schema = None` infers the layout from the header.
pub fn read_pose_csv<R: Read>(
    input: R,
    schema: Option<PoseSchema>,
    image: ImageDims,
) -> Result<Dataset, TrajectoryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    let fields: Vec<&str> = header.iter().collect();
    let inferred = PoseSchema::infer(&fields)?;
    let schema = match schema {
        Some(s) => {
            if s.layout != inferred.layout || s.has_label != inferred.has_label {
                return Err(TrajectoryError::Schema(format!(
                    "header describes {:?} (label: {}), expected {:?} (label: {})",
                    inferred.layout, inferred.has_label, s.layout, s.has_label
                )));
            }
            s
        }
        None => inferred,
    };

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(i64, Vec<f64>, i32)>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let row = rec.position().map_or(i + 2, |p| p.line() as usize);
        if rec.len() != schema.arity() {
            return Err(TrajectoryError::Parse {
                row,
                message: format!("expected {} columns, found {}", schema.arity(), rec.len()),
            });
        }
        let bad = |what: &str, v: &str| TrajectoryError::Parse {
            row,
            message: format!("invalid {what} `{v}`"),
        };
        let source = rec[0].to_string();
        let frame: i64 = rec[1].trim().parse().map_err(|_| bad("frame", &rec[1]))?;
        let coords = (2..2 + schema.layout.state_dim())
            .map(|c| {
                let v: f64 = rec[c]
                    .trim()
                    .parse()
                    .map_err(|_| bad("coordinate", &rec[c]))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad("coordinate", &rec[c]))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let label = if schema.has_label {
            let l = &rec[rec.len() - 1];
            l.trim().parse::<i32>().map_err(|_| bad("label", l))?
        } else {
            super::UNLABELED
        };
        if !rows.contains_key(&source) {
            order.push(source.clone());
        }
        rows.entry(source).or_default().push((frame, coords, label));
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for source in order {
        let mut r = rows.remove(&source).expect("collected above");
        r.sort_by_key(|x| x.0);
        for w in r.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(TrajectoryError::Schema(format!(
                    "frames of `{source}` are not contiguous ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        let labels = schema
            .has_label
            .then(|| r.iter().map(|x| x.2).collect::<Vec<_>>());
        let frames = r
            .into_iter()
            .map(|(_, c, _)| FrameState::from_stacked(schema.layout, c))
            .collect::<Result<Vec<_>, _>>()?;
        trajectories.push(Trajectory::new(source, frames, schema.frame_rate, labels)?);
    }
    Dataset::new(trajectories, Split::Train, image)
}

/// Ingest a pose CSV file; coordinates stay in pixels.
pub fn ingest_pose_file(
    path: impl AsRef<Path>,
    schema: Option<PoseSchema>,
    image: ImageDims,
) -> Result<Dataset, TrajectoryError> {
    let f = File::open(path)?;
    read_pose_csv(BufReader::new(f), schema, image)
}

/// Write every trajectory as CSV rows. Coordinates use the shortest
/// round-tripping decimal form, so re-reading is bitwise exact.
pub fn write_pose_csv<W: Write>(d: &Dataset, out: W) -> Result<(), TrajectoryError> {
    let has_label = d.trajectories.iter().any(|t| t.labels.is_some());
    let schema = PoseSchema::new(d.layout(), has_label);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(schema.header())?;
    let mut record: Vec<String> = Vec::with_capacity(schema.arity());
    for t in &d.trajectories {
        for (i, f) in t.frames.iter().enumerate() {
            record.clear();
            record.push(t.source_id.clone());
            record.push(i.to_string());
            record.extend(f.stacked().iter().map(|v| format!("{v:?}")));
            if has_label {
                let l = t.labels.as_ref().map_or(super::UNLABELED, |l| l[i]);
                record.push(l.to_string());
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary_cache<W: Write>(d: &Dataset, out: W) -> Result<(), TrajectoryError> {
    let mut out = BufWriter::new(out);
    let layout = d.layout();
    out.write_all(BINARY_MAGIC)?;
    out.write_u32::<LittleEndian>(layout.agents as u32)?;
    out.write_u32::<LittleEndian>(layout.keypoints as u32)?;
    out.write_f64::<LittleEndian>(d.image.width)?;
    out.write_f64::<LittleEndian>(d.image.height)?;
    out.write_u8(match d.split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    })?;
    out.write_u32::<LittleEndian>(d.trajectories.len() as u32)?;
    for t in &d.trajectories {
        out.write_u32::<LittleEndian>(t.source_id.len() as u32)?;
        out.write_all(t.source_id.as_bytes())?;
        out.write_f64::<LittleEndian>(t.frame_rate)?;
        out.write_u8(u8::from(t.is_normalized()))?;
        out.write_u32::<LittleEndian>(t.len() as u32)?;
        out.write_u8(u8::from(t.labels.is_some()))?;
        for f in &t.frames {
            for &v in f.stacked() {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        if let Some(l) = &t.labels {
            for &v in l {
                out.write_i32::<LittleEndian>(v)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary_cache<R: Read>(input: R) -> Result<Dataset, TrajectoryError> {
    let mut input = BufReader::new(input);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(TrajectoryError::Binary("bad magic".into()));
    }
    let agents = input.read_u32::<LittleEndian>()? as usize;
    let keypoints = input.read_u32::<LittleEndian>()? as usize;
    let layout = Layout::new(agents, keypoints);
    let width = input.read_f64::<LittleEndian>()?;
    let height = input.read_f64::<LittleEndian>()?;
    let split = match input.read_u8()? {
        0 => Split::Train,
        1 => Split::Val,
        2 => Split::Test,
        x => return Err(TrajectoryError::Binary(format!("bad split tag {x}"))),
    };
    let n = input.read_u32::<LittleEndian>()? as usize;
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut id = vec![0u8; len];
        input.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| TrajectoryError::Binary(e.to_string()))?;
        let frame_rate = input.read_f64::<LittleEndian>()?;
        let normalized = input.read_u8()? != 0;
        let frames_n = input.read_u32::<LittleEndian>()? as usize;
        let has_labels = input.read_u8()? != 0;
        let mut frames = Vec::with_capacity(frames_n);
        for _ in 0..frames_n {
            let mut c = vec![0.0; layout.state_dim()];
            input.read_f64_into::<LittleEndian>(&mut c)?;
            frames.push(FrameState::from_stacked(layout, c)?);
        }
        let labels = if has_labels {
            let mut l = vec![0i32; frames_n];
            input.read_i32_into::<LittleEndian>(&mut l)?;
            Some(l)
        } else {
            None
        };
        let mut t = Trajectory::new(id, frames, frame_rate, labels)?;
        t.set_normalized(normalized);
        trajectories.push(t);
    }
    Dataset::new(trajectories, split, ImageDims::new(width, height)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn header(agents: usize, kps: usize, label: bool) -> String {
        PoseSchema::new(Layout::new(agents, kps), label)
            .header()
            .join(",")
    }

    fn dims() -> ImageDims {
        ImageDims::new(1024.0, 570.0).unwrap()
    }

    #[test]
    fn two_agent_seven_keypoint_row() {
        let mut csv = header(2, 7, true);
        csv.push('\n');
        let coords: Vec<String> = (0..28).map(|i| format!("{}.5", i)).collect();
        csv.push_str(&format!("m1,0,{},3\n", coords.join(",")));
        let d = read_pose_csv(csv.as_bytes(), None, dims()).unwrap();
        assert_eq!(d.len(), 1);
        let f = &d.trajectories[0].frames[0];
        assert_eq!(f.layout(), Layout::new(2, 7));
        assert_eq!(f.keypoint(1, 0).x, 14.5);
        assert_eq!(d.trajectories[0].labels, Some(vec![3]));
    }

    #[test]
    fn five_hundred_rows_one_source() {
        let mut csv = header(1, 1, false);
        csv.push('\n');
        for i in 0..500 {
            csv.push_str(&format!("s,{i},{i},1\n"));
        }
        let d = read_pose_csv(csv.as_bytes(), None, dims()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.trajectories[0].len(), 500);
        assert_eq!(d.trajectories[0].frames[499].keypoint(0, 0).x, 499.0);
    }

    #[test]
    fn short_row_reports_row_number() {
        let mut csv = header(2, 7, true);
        csv.push('\n');
        let full: Vec<String> = (0..28).map(|i| i.to_string()).collect();
        csv.push_str(&format!("m1,0,{},0\n", full.join(",")));
        // 27 coordinates + label
        csv.push_str(&format!("m1,1,{},0\n", full[..27].join(",")));
        let err = read_pose_csv(csv.as_bytes(), None, dims()).unwrap_err();
        match err {
            TrajectoryError::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn declared_schema_must_match_header() {
        let mut csv = header(2, 7, false);
        csv.push('\n');
        let wrong = PoseSchema::new(Layout::new(2, 6), false);
        assert!(matches!(
            read_pose_csv(csv.as_bytes(), Some(wrong), dims()),
            Err(TrajectoryError::Schema(_))
        ));
    }

    #[test]
    fn non_contiguous_frames_rejected() {
        let csv = format!("{}\na,0,1,1\na,2,1,1\n", header(1, 1, false));
        assert!(matches!(
            read_pose_csv(csv.as_bytes(), None, dims()),
            Err(TrajectoryError::Schema(_))
        ));
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let coords = prop::collection::vec(-1e4f64..1e4, 4 * 3);
        prop::collection::vec((coords, prop::option::of(-1i32..5)), 1..3).prop_map(|frames| {
            let layout = Layout::new(2, 1);
            let mut trajectories = Vec::new();
            for (s, chunk) in frames.chunks(1).enumerate() {
                let (c, l) = &chunk[0];
                let fs = c
                    .chunks(4)
                    .map(|x| FrameState::from_stacked(layout, x.to_vec()).unwrap())
                    .collect::<Vec<_>>();
                let labels = l.map(|v| vec![v; fs.len()]);
                trajectories.push(Trajectory::new(format!("src{s}"), fs, 30.0, labels).unwrap());
            }
            Dataset::new(
                trajectories,
                Split::Train,
                ImageDims::new(640.0, 480.0).unwrap(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_bitwise(d in arb_dataset()) {
            let mut buf = Vec::new();
            write_pose_csv(&d, &mut buf).unwrap();
            let back = read_pose_csv(buf.as_slice(), None, d.image).unwrap();
            prop_assert_eq!(back.len(), d.len());
            for (a, b) in d.trajectories.iter().zip(&back.trajectories) {
                for (fa, fb) in a.frames.iter().zip(&b.frames) {
                    prop_assert!(fa.stacked().iter().zip(fb.stacked()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }

        #[test]
        fn binary_round_trip_is_identical(d in arb_dataset()) {
            let mut buf = Vec::new();
            write_binary_cache(&d, &mut buf).unwrap();
            prop_assert_eq!(&buf[..4], b"TRJ1");
            let back = read_binary_cache(buf.as_slice()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
