//! Run configuration as flat `key = value` text.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::selection::{SelectionConfig, SelectionMode};
use crate::system::PipelineConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub single_thread: bool,
    pub selection_enabled: bool,
    pub pipeline: PipelineConfig,
    /// Overrides camera.txt and the built-in default.
    pub intrinsics: Option<[f64; 4]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        Self {
            dataset: None,
            output: PathBuf::from("output"),
            seed: SelectionConfig::default().seed,
            single_thread: false,
            selection_enabled: true,
            pipeline,
            intrinsics: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let sel = p.selection.get_or_insert_with(SelectionConfig::default);
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output" => self.output = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "single_thread" => self.single_thread = parse_bool(key, value)?,
            "selection" => self.selection_enabled = parse_bool(key, value)?,
            "canny_low" => p.preprocess.canny_low = parse(key, value)?,
            "canny_high" => p.preprocess.canny_high = parse(key, value)?,
            "distance_cap" => p.preprocess.distance_cap = parse(key, value)?,
            "threshold_level0" => p.tracking.level_thresholds[0] = parse(key, value)?,
            "threshold_level1" => p.tracking.level_thresholds[1] = parse(key, value)?,
            "threshold_level2" => p.tracking.level_thresholds[2] = parse(key, value)?,
            "gradient_margin" => p.tracking.gradient_margin = parse(key, value)?,
            "huber_delta" => p.tracking.huber_delta = parse(key, value)?,
            "max_iterations" => p.tracking.max_iterations = parse(key, value)?,
            "convergence_eps" => p.tracking.convergence_eps = parse(key, value)?,
            "coarsest_level" => p.tracking.coarsest_level = parse(key, value)?,
            "keyframe_flow_weight" => p.tracking.keyframe_flow_weight = parse(key, value)?,
            "keyframe_translation_flow_weight" => p.tracking.keyframe_translation_flow_weight = parse(key, value)?,
            "keyframe_correspondence_ratio" => p.tracking.keyframe_correspondence_ratio = parse(key, value)?,
            "keyframe_max_interval" => p.tracking.keyframe_max_interval = parse(key, value)?,
            "edges_k" => sel.k = parse(key, value)?,
            "selection_lambda" => sel.lambda = parse(key, value)?,
            "selection_mode" => {
                sel.mode = match value {
                    "partition" => SelectionMode::PartitionGreedy,
                    "stochastic" => SelectionMode::StochasticGreedy { sample_size: 64 },
                    _ => return Err(Error::Config(format!("unknown selection mode '{value}'"))),
                }
            }
            "stochastic_sample_size" => {
                sel.mode = SelectionMode::StochasticGreedy {
                    sample_size: parse(key, value)?,
                }
            }
            "window_size" => p.window.capacity = parse(key, value)?,
            "window_iterations" => p.window.iterations = parse(key, value)?,
            "window_residual_threshold" => p.window.residual_threshold = parse(key, value)?,
            "window_depth_prior" => p.window.depth_prior_sigma = parse(key, value)?,
            "activation_cell" => p.window.activation_cell = parse(key, value)?,
            "activation_max_angle" => p.window.activation_max_angle_deg = parse(key, value)?,
            "optimize_intrinsics" => p.window.optimize_intrinsics = parse_bool(key, value)?,
            "fx" | "fy" | "cx" | "cy" => {
                let slot = ["fx", "fy", "cx", "cy"].iter().position(|k| *k == key).unwrap_or(0);
                let mut v = self.intrinsics.unwrap_or([f64::NAN; 4]);
                v[slot] = parse(key, value)?;
                self.intrinsics = Some(v);
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected 'key = value'".into(),
                });
            };
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_str(&fs::read_to_string(path)?, path)
    }

    /// Camera model for a sequence of the given size.
    pub fn camera(&self, sequence: Option<CameraIntrinsics>, width: u32, height: u32) -> Result<CameraIntrinsics> {
        let base = sequence.unwrap_or_else(CameraIntrinsics::tum_default);
        match self.intrinsics {
            Some(v) if v.iter().any(|x| x.is_nan()) => {
                Err(Error::Config("fx, fy, cx and cy must be given together".into()))
            }
            Some([fx, fy, cx, cy]) => CameraIntrinsics::new(fx, fy, cx, cy, width, height),
            None => CameraIntrinsics::new(base.fx, base.fy, base.cx, base.cy, width, height),
        }
    }

    /// Pipeline settings with the top-level switches folded in.
    pub fn resolved_pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.single_thread = self.single_thread;
        if self.selection_enabled {
            let mut s = p.selection.unwrap_or_default();
            s.seed = self.seed;
            p.selection = Some(s);
        } else {
            p.selection = None;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_pipeline().validate()
    }
}
