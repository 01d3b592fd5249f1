//! JSON-lines scene files. Line 1 is a header; every following line is one scene with
//! f64 arrays stored as base64 of little-endian bytes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::body::{asset_hash, BodyModelAsset, ParamSet, SHAPE_DIM};
use crate::camera::CameraParams;
use crate::error::{MucError, Result};
use crate::jrn::ViewFeature;
use crate::synth::{SceneSample, Split};

pub const DATASET_FORMAT: &str = "muc-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub asset_hash: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct B64(Vec<f64>);

impl Serialize for B64 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for B64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = STANDARD.decode(s).map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom("f64 array byte length not a multiple of 8"));
        }
        Ok(B64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()))
    }
}

fn rows3(v: &[f64], what: &str) -> Result<Vec<[f64; 3]>> {
    if v.len() % 3 != 0 {
        return Err(MucError::Format(format!("{what}: length {} not a multiple of 3", v.len())));
    }
    Ok(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn fixed<const N: usize>(v: &[f64], what: &str) -> Result<[f64; N]> {
    v.try_into().map_err(|_| MucError::Format(format!("{what}: expected {N} values, got {}", v.len())))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRec {
    body: B64,
    hand: B64,
    shape: B64,
    face: B64,
}

impl ParamRec {
    fn from(p: &ParamSet) -> Self {
        ParamRec {
            body: B64(p.p_body.concat()),
            hand: B64(p.p_hand.concat()),
            shape: B64(p.p_shape.to_vec()),
            face: B64(p.p_face.to_vec()),
        }
    }

    fn into_params(self, camera: Option<CameraParams>) -> Result<ParamSet> {
        Ok(ParamSet {
            p_body: rows3(&self.body.0, "body pose")?,
            p_hand: rows3(&self.hand.0, "hand pose")?,
            p_shape: fixed::<SHAPE_DIM>(&self.shape.0, "shape")?,
            p_face: fixed::<SHAPE_DIM>(&self.face.0, "face")?,
            p_camera: camera,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRec {
    rotation: B64,
    translation: B64,
    focal: B64,
    principal: B64,
    image_size: [u32; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRec {
    params: ParamRec,
    task_feature: B64,
    hand_feature: B64,
    joints2d: B64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRec {
    scene_id: String,
    split: Split,
    gt: ParamRec,
    cameras: Vec<CameraRec>,
    views: Vec<ViewRec>,
}

fn to_record(s: &SceneSample) -> SceneRec {
    SceneRec {
        scene_id: s.scene_id.clone(),
        split: s.split,
        gt: ParamRec::from(&s.gt_params),
        cameras: s
            .cameras
            .iter()
            .map(|c| CameraRec {
                rotation: B64(c.rotation.concat()),
                translation: B64(c.translation.to_vec()),
                focal: B64(c.focal.to_vec()),
                principal: B64(c.principal.to_vec()),
                image_size: c.image_size,
            })
            .collect(),
        views: s
            .view_estimates
            .iter()
            .zip(&s.view_features)
            .zip(&s.gt_joints2d)
            .map(|((e, f), j)| ViewRec {
                params: ParamRec::from(e),
                task_feature: B64(f.task_feature.clone()),
                hand_feature: B64(f.hand_feature.clone()),
                joints2d: B64(j.concat()),
            })
            .collect(),
    }
}

fn from_record(r: SceneRec) -> Result<SceneSample> {
    if r.cameras.is_empty() || r.cameras.len() != r.views.len() {
        return Err(MucError::Format(format!("scene {}: {} cameras for {} views", r.scene_id, r.cameras.len(), r.views.len())));
    }
    let cameras = r
        .cameras
        .into_iter()
        .map(|c| {
            let rot: [f64; 9] = fixed(&c.rotation.0, "rotation")?;
            let cam = CameraParams {
                rotation: [[rot[0], rot[1], rot[2]], [rot[3], rot[4], rot[5]], [rot[6], rot[7], rot[8]]],
                translation: fixed(&c.translation.0, "translation")?,
                focal: fixed(&c.focal.0, "focal")?,
                principal: fixed(&c.principal.0, "principal")?,
                image_size: c.image_size,
            };
            cam.validate()?;
            Ok(cam)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut view_estimates = Vec::new();
    let mut view_features = Vec::new();
    let mut gt_joints2d = Vec::new();
    for (v, cam) in r.views.into_iter().zip(&cameras) {
        view_estimates.push(v.params.into_params(Some(cam.clone()))?);
        view_features.push(ViewFeature { task_feature: v.task_feature.0, hand_feature: v.hand_feature.0 });
        if v.joints2d.0.len() % 2 != 0 {
            return Err(MucError::Format("odd 2D landmark array".into()));
        }
        gt_joints2d.push(v.joints2d.0.chunks_exact(2).map(|c| [c[0], c[1]]).collect());
    }
    Ok(SceneSample { scene_id: r.scene_id, split: r.split, gt_params: r.gt.into_params(None)?, cameras, view_estimates, view_features, gt_joints2d })
}

pub fn write_dataset(path: &Path, asset: &BodyModelAsset, samples: &[SceneSample]) -> Result<()> {
    let header = DatasetHeader { format: DATASET_FORMAT.into(), version: DATASET_VERSION, asset_hash: asset_hash(asset), count: samples.len() };
    let io = |e| MucError::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let json = |e: serde_json::Error| MucError::Format(e.to_string());
    writeln!(out, "{}", serde_json::to_string(&header).map_err(json)?).map_err(io)?;
    for s in samples {
        writeln!(out, "{}", serde_json::to_string(&to_record(s)).map_err(json)?).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let file = std::fs::File::open(path).map_err(|e| MucError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let what = path.display().to_string();
    let first = lines.next().ok_or_else(|| MucError::Truncated(format!("{what}: empty file")))?.map_err(|e| MucError::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| MucError::Format(format!("{what} header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(MucError::Format(format!("{what}: format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(MucError::VersionMismatch { found: header.version, expected: DATASET_VERSION });
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| MucError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let rec: SceneRec = serde_json::from_str(&line).map_err(|e| {
            if e.is_eof() {
                MucError::Truncated(format!("{what}: record {i} cut short"))
            } else {
                MucError::Format(format!("{what} record {i}: {e}"))
            }
        })?;
        samples.push(from_record(rec)?);
    }
    if samples.len() != header.count {
        return Err(MucError::Truncated(format!("{what}: header promises {} scenes, found {}", header.count, samples.len())));
    }
    Ok((header, samples))
}

/// Reads a dataset and checks it was generated from `asset`.
pub fn read_dataset_checked(path: &Path, asset: &BodyModelAsset) -> Result<Vec<SceneSample>> {
    let (header, samples) = read_dataset(path)?;
    let expected = asset_hash(asset);
    if header.asset_hash != expected {
        return Err(MucError::AssetHashMismatch { expected, found: header.asset_hash });
    }
    for s in &samples {
        s.gt_params.check_dims(asset)?;
    }
    Ok(samples)
}

pub fn filter_split(samples: &[SceneSample], split: Split) -> Vec<SceneSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::make_toy_asset;
    use crate::synth::{generate_dataset, DatasetSpec, SceneConfig};

    #[test]
    fn round_trip_truncation_and_filter() {
        let a = make_toy_asset(200, 25, 1).unwrap();
        let spec = DatasetSpec { n_train: 2, n_val: 1, n_test: 1, scene: SceneConfig { n_cameras: 3, ..SceneConfig::default() } };
        let d = generate_dataset(&a, &spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &a, &d).unwrap();
        let back = read_dataset_checked(&p, &a).unwrap();
        assert_eq!(back, d);
        assert_eq!(filter_split(&back, Split::Train).len(), 2);
        assert!(filter_split(&back, Split::Val).iter().all(|s| s.split == Split::Val));

        let text = std::fs::read_to_string(&p).unwrap();
        let cut = dir.path().join("cut.jsonl");
        std::fs::write(&cut, &text[..text.len() - 40]).unwrap();
        assert!(matches!(read_dataset(&cut), Err(MucError::Truncated(_))));
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&cut, lines[..3].join("\n")).unwrap();
        assert!(matches!(read_dataset(&cut), Err(MucError::Truncated(_))));

        let other = make_toy_asset(200, 25, 2).unwrap();
        assert!(matches!(read_dataset_checked(&p, &other), Err(MucError::AssetHashMismatch { .. })));
        assert!(matches!(read_dataset(&dir.path().join("missing")), Err(MucError::Io { .. })));
    }
}
