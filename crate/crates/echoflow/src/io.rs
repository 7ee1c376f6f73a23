//! On-disk formats: sequence directories of grayscale PNG frames with a
//! JSON sidecar and optional label-mask PNGs, the binary deformation-field
//! dump, the loss log CSV, and color overlays.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{DeformationField, LabelMask};
use crate::fit::{FitConfig, FitResult, FittedParams};
use crate::loss::LossBreakdown;
use crate::sequence::ImageSequence;

pub const MAX_LABEL: u8 = 3;
const FIELD_MAGIC: &[u8; 4] = b"EODF";
const FIELD_VERSION: u8 = 1;

/// Class colors for overlays, alpha-blended onto the frame.
pub const OVERLAY_COLORS: [(u8, u8, u8); 3] = [(255, 60, 60), (60, 220, 60), (80, 80, 255)];
pub const OVERLAY_ALPHA: f64 = 0.45;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    BadMeta { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    BadImage { path: PathBuf, detail: String },
    #[error("missing file {path}")]
    Missing { path: PathBuf },
    #[error("{path}: label {label} outside 0..={MAX_LABEL}")]
    BadLabel { path: PathBuf, label: u8 },
    #[error("{path}: {detail}")]
    BadFormat { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub num_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<f64>,
    /// Normalized frame times; uniform over [0,1] when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame_times: Option<Vec<f64>>,
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.png")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:04}.png")
}

fn load_gray(path: &Path) -> Result<GrayImage, IoError> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| IoError::BadImage { path: path.to_path_buf(), detail: e.to_string() })?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(IoError::BadImage {
            path: path.to_path_buf(),
            detail: format!("expected 8-bit grayscale, got {:?}", other.color()),
        }),
    }
}

fn save_gray(path: &Path, data: &[u8], h: usize, w: usize) -> Result<(), IoError> {
    let img = GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| IoError::BadImage { path: path.to_path_buf(), detail: e.to_string() })
}

/// Write frames (and masks, when given) of a sequence as a standard
/// sequence directory.
pub fn save_sequence_dir(
    dir: &Path,
    seq: &ImageSequence,
    masks: Option<&[LabelMask]>,
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = SequenceMeta {
        num_frames: seq.num_frames(),
        pixel_spacing_mm: seq.spacing_mm,
        frame_times: Some(seq.times.clone()),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let bytes: Vec<u8> = frame.iter().map(|&v| (v * 255.0).round() as u8).collect();
        save_gray(&dir.join(frame_name(i)), &bytes, seq.h, seq.w)?;
    }
    if let Some(masks) = masks {
        save_masks(dir, masks)?;
    }
    Ok(())
}

pub fn save_masks(dir: &Path, masks: &[LabelMask]) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, m) in masks.iter().enumerate() {
        save_gray(&dir.join(mask_name(i)), &m.labels, m.h, m.w)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_meta(dir: &Path) -> Result<SequenceMeta, IoError> {
    let path = dir.join("meta.json");
    let bytes = fs::read(&path).map_err(|_| IoError::Missing { path: path.clone() })?;
    let meta: SequenceMeta = serde_json::from_slice(&bytes)
        .map_err(|e| IoError::BadMeta { path: path.clone(), detail: e.to_string() })?;
    if meta.num_frames < 2 {
        return Err(IoError::BadMeta {
            path,
            detail: format!("num_frames = {} is below 2", meta.num_frames),
        });
    }
    if let Some(times) = &meta.frame_times {
        if times.len() != meta.num_frames {
            return Err(IoError::BadMeta {
                path,
                detail: format!(
                    "{} frame_times for {} frames",
                    times.len(),
                    meta.num_frames
                ),
            });
        }
    }
    Ok(meta)
}

/// Load the masks of a sequence directory: all of `mask_0000.png` ... must
/// exist and carry labels within the declared set.
pub fn load_masks(dir: &Path, num_frames: usize) -> Result<Vec<LabelMask>, IoError> {
    let mut masks = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let path = dir.join(mask_name(i));
        if !path.exists() {
            return Err(IoError::Missing { path });
        }
        let img = load_gray(&path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels = img.into_raw();
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
            return Err(IoError::BadLabel { path, label: bad });
        }
        masks.push(LabelMask::new(labels, h, w));
    }
    Ok(masks)
}

/// Load a single label-mask PNG.
pub fn load_mask_file(path: &Path) -> Result<LabelMask, IoError> {
    if !path.exists() {
        return Err(IoError::Missing { path: path.to_path_buf() });
    }
    let img = load_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.into_raw();
    if let Some(&bad) = labels.iter().find(|&&l| l > MAX_LABEL) {
        return Err(IoError::BadLabel { path: path.to_path_buf(), label: bad });
    }
    Ok(LabelMask::new(labels, h, w))
}

/// Load every consecutively numbered mask in a directory (at least one).
pub fn load_mask_dir(dir: &Path) -> Result<Vec<LabelMask>, IoError> {
    let mut n = 0;
    while dir.join(mask_name(n)).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(IoError::Missing { path: dir.join(mask_name(0)) });
    }
    load_masks(dir, n)
}

/// Load a sequence directory: frames normalized to [0,1], optional masks
/// (present when `mask_0000.png` exists).
pub fn load_sequence(
    dir: &Path,
) -> Result<(ImageSequence, Option<Vec<LabelMask>>), IoError> {
    let meta = read_meta(dir)?;
    let n = meta.num_frames;
    let mut frames = Vec::with_capacity(n);
    let (mut h, mut w) = (0usize, 0usize);
    for i in 0..n {
        let path = dir.join(frame_name(i));
        if !path.exists() {
            return Err(IoError::Missing { path });
        }
        let img = load_gray(&path)?;
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        if i == 0 {
            (h, w) = (ih, iw);
        } else if (ih, iw) != (h, w) {
            return Err(IoError::BadImage {
                path,
                detail: format!("size {ih}x{iw} differs from frame 0 ({h}x{w})"),
            });
        }
        frames.push(img.into_raw().iter().map(|&v| f64::from(v) / 255.0).collect());
    }
    let times = meta
        .frame_times
        .clone()
        .unwrap_or_else(|| ImageSequence::uniform_times(n));
    let seq = ImageSequence::new(frames, h, w, times, meta.pixel_spacing_mm).map_err(|e| {
        IoError::BadMeta { path: dir.join("meta.json"), detail: e }
    })?;

    let masks = if dir.join(mask_name(0)).exists() {
        let masks = load_masks(dir, n)?;
        for (i, m) in masks.iter().enumerate() {
            if (m.h, m.w) != (h, w) {
                return Err(IoError::BadImage {
                    path: dir.join(mask_name(i)),
                    detail: format!("mask size {}x{} differs from frames ({h}x{w})", m.h, m.w),
                });
            }
        }
        Some(masks)
    } else {
        None
    };
    Ok((seq, masks))
}

/// Binary deformation-field dump: magic, version, u32 H W T, then T
/// row-major fields of (col,row) f64 pairs in absolute coordinates.
pub fn write_field_dump(path: &Path, fields: &[DeformationField]) -> Result<(), IoError> {
    let (h, w) = (fields[0].h, fields[0].w);
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    let mut header = Vec::with_capacity(17);
    header.extend_from_slice(FIELD_MAGIC);
    header.push(FIELD_VERSION);
    header.extend_from_slice(&(h as u32).to_le_bytes());
    header.extend_from_slice(&(w as u32).to_le_bytes());
    header.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    f.write_all(&header).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(h * w * 2 * 8);
    for field in fields {
        assert_eq!((field.h, field.w), (h, w), "uniform field extents");
        buf.clear();
        for &v in &field.phi {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(io_err(path))?;
    }
    Ok(())
}

/// Read a field dump back; returns (h, w, per-frame interleaved coords).
pub fn read_field_dump(path: &Path) -> Result<(usize, usize, Vec<Vec<f64>>), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |detail: String| IoError::BadFormat { path: path.to_path_buf(), detail };
    if bytes.len() < 17 {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[4] != FIELD_VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (h, w, t) = (u32_at(5), u32_at(9), u32_at(13));
    let expect = 17 + t * h * w * 2 * 8;
    if bytes.len() != expect {
        return Err(bad(format!("payload is {} bytes, header implies {expect}", bytes.len())));
    }
    let mut fields = Vec::with_capacity(t);
    let mut offset = 17;
    for _ in 0..t {
        let mut phi = Vec::with_capacity(h * w * 2);
        for _ in 0..h * w * 2 {
            phi.push(f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()));
            offset += 8;
        }
        fields.push(phi);
    }
    Ok((h, w, fields))
}

/// Loss log CSV; floats use shortest round-trip formatting.
pub fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<(), IoError> {
    let mut csv = String::from("step,total,sim,seg,ef,jdet,smt\n");
    for (i, b) in history.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            b.total, b.sim, b.seg, b.ef, b.jdet, b.smt
        ));
    }
    fs::write(path, csv).map_err(io_err(path))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub config: FitConfig,
    pub steps_run: usize,
    pub initial: LossBreakdown,
    pub final_loss: LossBreakdown,
}

/// Persist a fit: propagated masks (plus a meta.json so the directory loads
/// as a mask sequence), the field dump, the loss log, a JSON report, and
/// the parameter checkpoint when the provider has one.
pub fn save_outputs(
    out_dir: &Path,
    result: &FitResult,
    config: &FitConfig,
) -> Result<(), IoError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    save_masks(out_dir, &result.masks)?;
    let meta = SequenceMeta {
        num_frames: result.masks.len(),
        pixel_spacing_mm: None,
        frame_times: Some(result.fields.iter().map(|f| f.time).collect()),
    };
    write_json(&out_dir.join("meta.json"), &meta)?;
    write_field_dump(&out_dir.join("fields.eodf"), &result.fields)?;
    write_loss_csv(&out_dir.join("loss.csv"), &result.history)?;
    let report = FitReport {
        config: config.clone(),
        steps_run: result.history.len(),
        initial: result.history[0],
        final_loss: *result.history.last().unwrap(),
    };
    write_json(&out_dir.join("report.json"), &report)?;
    if let FittedParams::Cnn(params) = &result.params {
        params
            .save(&out_dir.join("params.eodm"))
            .map_err(|e| IoError::BadFormat {
                path: out_dir.join("params.eodm"),
                detail: e.to_string(),
            })?;
    }
    Ok(())
}

/// Color overlays, one RGB PNG per frame: class colors alpha-blended onto
/// the grayscale frame; background stays untouched.
pub fn write_overlays(
    dir: &Path,
    seq: &ImageSequence,
    masks: &[LabelMask],
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, (frame, mask)) in seq.frames.iter().zip(masks).enumerate() {
        let mut rgb = vec![0u8; seq.h * seq.w * 3];
        for (j, (&v, &label)) in frame.iter().zip(&mask.labels).enumerate() {
            let gray = (v * 255.0).round();
            let (r, g, b) = if label == 0 || label > MAX_LABEL {
                (gray, gray, gray)
            } else {
                let (cr, cg, cb) = OVERLAY_COLORS[usize::from(label) - 1];
                let blend = |c: u8| (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * f64::from(c);
                (blend(cr), blend(cg), blend(cb))
            };
            rgb[3 * j] = r.round() as u8;
            rgb[3 * j + 1] = g.round() as u8;
            rgb[3 * j + 2] = b.round() as u8;
        }
        let path = dir.join(format!("overlay_{i:04}.png"));
        let img = RgbImage::from_raw(seq.w as u32, seq.h as u32, rgb)
            .expect("buffer matches dimensions");
        img.save(&path)
            .map_err(|e| IoError::BadImage { path, detail: e.to_string() })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_sequence, ProviderKind};
    use crate::phantom::{generate_phantom, PhantomConfig};
    use tempfile::tempdir;

    #[test]
    fn phantom_directory_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        save_sequence_dir(dir.path(), &truth.seq, Some(&truth.masks)).unwrap();

        let (seq, masks) = load_sequence(dir.path()).unwrap();
        assert_eq!(seq.num_frames(), truth.seq.num_frames());
        assert_eq!(seq.frames, truth.seq.frames);
        assert_eq!(seq.times, truth.seq.times);
        let masks = masks.unwrap();
        for (a, b) in masks.iter().zip(&truth.masks) {
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn missing_pieces_are_named_in_errors() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        save_sequence_dir(dir.path(), &truth.seq, None).unwrap();

        fs::remove_file(dir.path().join(frame_name(3))).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_0003.png"), "{err}");

        fs::remove_file(dir.path().join("meta.json")).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("meta.json"), "{err}");
    }

    #[test]
    fn unknown_labels_are_rejected_with_file_and_value() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        let mut masks = truth.masks.clone();
        masks[2].labels[10] = 7;
        save_sequence_dir(dir.path(), &truth.seq, Some(&masks)).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mask_0002.png") && err.contains("label 7"), "{err}");
    }

    #[test]
    fn non_grayscale_frames_are_rejected() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        save_sequence_dir(dir.path(), &truth.seq, None).unwrap();
        let rgb = RgbImage::from_raw(64, 64, vec![128; 64 * 64 * 3]).unwrap();
        rgb.save(dir.path().join(frame_name(1))).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_0001.png") && err.contains("grayscale"), "{err}");
    }

    #[test]
    fn field_dump_round_trips_and_validates_length() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        let path = dir.path().join("fields.eodf");
        write_field_dump(&path, &truth.fields).unwrap();

        let expect = 17 + 10 * 64 * 64 * 2 * 8;
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, expect);

        let (h, w, fields) = read_field_dump(&path).unwrap();
        assert_eq!((h, w, fields.len()), (64, 64, 10));
        for (a, b) in fields.iter().zip(&truth.fields) {
            assert_eq!(a, &b.phi);
        }

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(read_field_dump(&path).is_err());
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_field_dump(&path).is_err());
    }

    #[test]
    fn fit_outputs_round_trip() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig {
            h: 32,
            w: 32,
            a_x: 8.0,
            a_y: 9.0,
            ring: 3.0,
            ..PhantomConfig::default()
        })
        .unwrap();
        let config = FitConfig {
            steps: 2,
            provider: ProviderKind::DenseGrid,
            ..FitConfig::default()
        };
        let result =
            fit_sequence(&truth.seq, &truth.masks[0], truth.masks.last().unwrap(), &config)
                .unwrap();
        save_outputs(dir.path(), &result, &config).unwrap();

        let masks = load_masks(dir.path(), result.masks.len()).unwrap();
        for (a, b) in masks.iter().zip(&result.masks) {
            assert_eq!(a.labels, b.labels);
        }
        let (_, _, fields) = read_field_dump(&dir.path().join("fields.eodf")).unwrap();
        assert_eq!(fields.len(), truth.seq.num_frames());
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "step,total,sim,seg,ef,jdet,smt");
        assert_eq!(csv.lines().count(), 1 + config.steps);
        let report: FitReport =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(report.steps_run, 2);
        assert!(report.final_loss.total.is_finite());
        assert!(!dir.path().join("params.eodm").exists());
    }

    #[test]
    fn overlays_blend_class_colors() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        write_overlays(dir.path(), &truth.seq, &truth.masks).unwrap();
        for i in 0..truth.seq.num_frames() {
            assert!(dir.path().join(format!("overlay_{i:04}.png")).exists());
        }
        let img = image::open(dir.path().join("overlay_0000.png")).unwrap().to_rgb8();
        // Center pixel is LV cavity (class 1, red-tinted).
        let center = img.get_pixel(32, 32);
        let gray = (truth.seq.frames[0][32 * 64 + 32] * 255.0).round();
        let want_r = (0.55 * gray + 0.45 * 255.0).round() as u8;
        let want_g = (0.55 * gray + 0.45 * 60.0).round() as u8;
        assert_eq!(center.0[0], want_r);
        assert_eq!(center.0[1], want_g);
        // A corner pixel is background and stays gray.
        let corner = img.get_pixel(0, 0);
        assert_eq!(corner.0[0], corner.0[1]);
        assert_eq!(corner.0[1], corner.0[2]);
    }

    #[test]
    fn explicit_frame_times_survive_the_round_trip() {
        let dir = tempdir().unwrap();
        let truth = generate_phantom(&PhantomConfig::default()).unwrap();
        let mut times = ImageSequence::uniform_times(10);
        times[3] = 0.37;
        let seq = ImageSequence::new(
            truth.seq.frames.clone(),
            64,
            64,
            times.clone(),
            Some(0.25),
        )
        .unwrap();
        save_sequence_dir(dir.path(), &seq, None).unwrap();
        let (loaded, _) = load_sequence(dir.path()).unwrap();
        assert_eq!(loaded.times, times);
        assert_eq!(loaded.spacing_mm, Some(0.25));

        // Corrupt the count.
        let meta = SequenceMeta {
            num_frames: 10,
            pixel_spacing_mm: None,
            frame_times: Some(vec![0.0, 1.0]),
        };
        write_json(&dir.path().join("meta.json"), &meta).unwrap();
        let err = load_sequence(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_times"), "{err}");
    }
}
