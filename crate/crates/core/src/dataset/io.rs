//! NDJSON clip files and the sibling `manifest.json`.
//!
//! One clip per line:
//!
//! ```text
//! {"clip_id": "c0", "width": 1280, "height": 720, "T": 10, "group_label": 3,
//!  "persons": [{"actions": 1, "kpts": [[[x, y, conf], ...17], ...T], "present": [true, ...T]}],
//!  "objects": [{"kpts": [[x, y], ...T]}]}
//! ```
//!
//! `present` is optional and defaults to all frames present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{quantize, Manifest, ObjectTrack, PersonTrack, RawClip};
use crate::error::DatasetError;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    clip_id: String,
    width: u32,
    height: u32,
    #[serde(rename = "T")]
    frames: usize,
    group_label: usize,
    persons: Vec<PersonRecord>,
    #[serde(default)]
    objects: Vec<ObjectRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonRecord {
    actions: Option<usize>,
    kpts: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    present: Option<Vec<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    kpts: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    present: Option<Vec<bool>>,
}

fn present_or_all(p: Option<Vec<bool>>, n: usize) -> Vec<bool> {
    p.unwrap_or_else(|| vec![true; n])
}

fn compact_present(p: &[bool]) -> Option<Vec<bool>> {
    (!p.iter().all(|&x| x)).then(|| p.to_vec())
}

impl From<ClipRecord> for RawClip {
    fn from(r: ClipRecord) -> Self {
        let persons = r
            .persons
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let n = p.kpts.len();
                PersonTrack {
                    person_index: i,
                    keypoints: p
                        .kpts
                        .iter()
                        .map(|f| f.iter().map(|k| [quantize(k[0]), quantize(k[1])]).collect())
                        .collect(),
                    confidences: p.kpts.iter().map(|f| f.iter().map(|k| k[2]).collect()).collect(),
                    present: present_or_all(p.present, n),
                    action: p.actions,
                }
            })
            .collect();
        let objects = r
            .objects
            .into_iter()
            .enumerate()
            .map(|(i, o)| {
                let n = o.kpts.len();
                ObjectTrack {
                    object_index: i,
                    keypoints: o.kpts.iter().map(|k| [quantize(k[0]), quantize(k[1])]).collect(),
                    present: present_or_all(o.present, n),
                }
            })
            .collect();
        RawClip {
            clip_id: r.clip_id,
            frame_width: r.width,
            frame_height: r.height,
            num_frames: r.frames,
            persons,
            objects,
            group_label: r.group_label,
        }
    }
}

impl From<&RawClip> for ClipRecord {
    fn from(c: &RawClip) -> Self {
        ClipRecord {
            clip_id: c.clip_id.clone(),
            width: c.frame_width,
            height: c.frame_height,
            frames: c.num_frames,
            group_label: c.group_label,
            persons: c
                .persons
                .iter()
                .map(|p| PersonRecord {
                    actions: p.action,
                    kpts: p
                        .keypoints
                        .iter()
                        .zip(&p.confidences)
                        .map(|(f, cf)| f.iter().zip(cf).map(|(k, &c)| [k[0], k[1], c]).collect())
                        .collect(),
                    present: compact_present(&p.present),
                })
                .collect(),
            objects: c
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    kpts: o.keypoints.clone(),
                    present: compact_present(&o.present),
                })
                .collect(),
        }
    }
}

/// `manifest.json` in the same directory as the clip file.
pub fn manifest_path_for(clips: &Path) -> PathBuf {
    clips
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("manifest.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

/// Loads a clip file together with its sibling manifest.
pub fn load_dataset(path: &Path) -> Result<(Vec<RawClip>, Manifest), DatasetError> {
    let manifest = load_manifest(&manifest_path_for(path))?;
    let clips = load_clips(path, &manifest)?;
    Ok((clips, manifest))
}

/// Parses and validates every line; clips keep file order.
pub fn load_clips(path: &Path, manifest: &Manifest) -> Result<Vec<RawClip>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut clips = Vec::new();
    let mut frames: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let clip_name = value
            .get("clip_id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("<line {line_no}>"), str::to_string);
        let record: ClipRecord = serde_json::from_value(value).map_err(|e| DatasetError::Schema {
            clip: clip_name,
            msg: e.to_string(),
        })?;
        let clip = RawClip::from(record);
        clip.validate(manifest)?;
        match frames {
            None => frames = Some(clip.num_frames),
            Some(t) if t != clip.num_frames => {
                return Err(DatasetError::Dimension {
                    clip: clip.clip_id,
                    msg: format!("T = {} but earlier clips have T = {t}", clip.num_frames),
                })
            }
            _ => {}
        }
        clips.push(clip);
    }
    Ok(clips)
}

pub fn save_clips(path: &Path, clips: &[RawClip]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for clip in clips {
        let line = serde_json::to_string(&ClipRecord::from(clip)).expect("clip serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes the clip file and its sibling manifest.
pub fn save_dataset(path: &Path, clips: &[RawClip], manifest: &Manifest) -> Result<(), DatasetError> {
    save_clips(path, clips)?;
    let mpath = manifest_path_for(path);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&mpath, text).map_err(io_err(&mpath))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::skeleton::COCO_KEYPOINTS;

    fn manifest() -> Manifest {
        Manifest::volleyball()
    }

    fn person_json(frames: usize) -> String {
        let frame: Vec<String> = (0..COCO_KEYPOINTS.len())
            .map(|j| format!("[{}.5,{},0.9]", 100 + j, 200 + j))
            .collect();
        let frame = format!("[{}]", frame.join(","));
        let kpts = vec![frame; frames].join(",");
        format!("{{\"actions\":1,\"kpts\":[{kpts}]}}")
    }

    fn clip_json(id: &str, persons: &[usize]) -> String {
        let persons: Vec<String> = persons.iter().map(|&t| person_json(t)).collect();
        let ball = vec!["[640,360]"; 10].join(",");
        format!(
            "{{\"clip_id\":\"{id}\",\"width\":1280,\"height\":720,\"T\":10,\"group_label\":2,\"persons\":[{}],\"objects\":[{{\"kpts\":[{ball}]}}]}}",
            persons.join(",")
        )
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("clips.ndjson");
        std::fs::write(&path, body).unwrap();
        let m = serde_json::to_string(&manifest()).unwrap();
        std::fs::write(dir.join("manifest.json"), m).unwrap();
        path
    }

    #[test]
    fn loads_volleyball_sized_clip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &clip_json("a", &[10; 12]));
        let (clips, _) = load_dataset(&path).unwrap();
        assert_eq!(clips.len(), 1);
        let c = &clips[0];
        assert_eq!(c.persons.len(), 12);
        assert!(c.persons.iter().all(|p| p.keypoints.len() == 10 && p.num_joints() == 17));
        assert_eq!(c.objects.len(), 1);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "");
        assert!(load_dataset(&path).unwrap().0.is_empty());
    }

    #[test]
    fn short_track_names_the_person() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &clip_json("a", &[10, 10, 9]));
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, DatasetError::Schema { .. }), "{err}");
        assert!(err.to_string().contains("person 2"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{}\n{{not json\n", clip_json("a", &[10]));
        let path = write(dir.path(), &body);
        match load_dataset(&path).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_field_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = clip_json("a", &[10]).replacen("\"width\"", "\"widht\"", 1);
        let path = write(dir.path(), &body);
        let err = load_dataset(&path).unwrap_err();
        assert!(matches!(err, DatasetError::Schema { .. }));
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn joint_count_mismatch_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = clip_json("a", &[10]).replacen(",[116.5,216,0.9]", "", 1);
        let path = write(dir.path(), &body);
        assert!(matches!(load_dataset(&path), Err(DatasetError::Dimension { .. })));
    }

    #[test]
    fn out_of_frame_keypoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = clip_json("a", &[10]).replacen("[100.5,200,", "[1300.5,200,", 1);
        let path = write(dir.path(), &body);
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &clip_json("a", &[10, 10]));
        let (clips, m) = load_dataset(&path).unwrap();
        let out = dir.path().join("out.ndjson");
        save_dataset(&out, &clips, &m).unwrap();
        let (again, m2) = load_dataset(&out).unwrap();
        assert_eq!(clips, again);
        assert_eq!(m, m2);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
    }
}
