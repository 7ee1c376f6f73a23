//! In-memory image sequence: ordered grayscale frames with normalized times.

/// Grayscale frames in `[0,1]`, one per acquisition time; times are
/// normalized so the first frame sits at 0 and the last at 1.
#[derive(Clone, Debug)]
pub struct ImageSequence {
    pub frames: Vec<Vec<f64>>,
    pub h: usize,
    pub w: usize,
    pub times: Vec<f64>,
    pub spacing_mm: Option<f64>,
}

impl ImageSequence {
    pub fn new(
        frames: Vec<Vec<f64>>,
        h: usize,
        w: usize,
        times: Vec<f64>,
        spacing_mm: Option<f64>,
    ) -> Result<Self, String> {
        if frames.len() < 2 {
            return Err(format!("sequence needs at least 2 frames, got {}", frames.len()));
        }
        if times.len() != frames.len() {
            return Err(format!("{} frames but {} times", frames.len(), times.len()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.len() != h * w {
                return Err(format!("frame {i} has {} pixels, expected {}", f.len(), h * w));
            }
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(format!("times must span [0,1], got [{}, {}]", times[0], times.last().unwrap()));
        }
        if times.windows(2).any(|p| p[1] <= p[0]) {
            return Err("times must be strictly increasing".into());
        }
        Ok(Self { frames, h, w, times, spacing_mm })
    }

    /// Uniform frame times i/(n-1).
    pub fn uniform_times(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_frame_and_time_consistency() {
        let f = vec![vec![0.0; 4]; 3];
        assert!(ImageSequence::new(f.clone(), 2, 2, ImageSequence::uniform_times(3), None).is_ok());
        assert!(ImageSequence::new(f.clone(), 2, 2, vec![0.0, 0.5], None).is_err());
        assert!(ImageSequence::new(f.clone(), 2, 2, vec![0.0, 0.6, 0.9], None).is_err());
        assert!(ImageSequence::new(f, 3, 2, ImageSequence::uniform_times(3), None).is_err());
    }

    #[test]
    fn uniform_times_span_unit_interval() {
        let t = ImageSequence::uniform_times(10);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[9], 1.0);
        assert!((t[1] - 1.0 / 9.0).abs() < 1e-15);
    }
}
