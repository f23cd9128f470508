//! JSON model files and the shipped fitted presets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::components::{basis_grid, ComponentError, GridDef, HydraulicModel, RampSpec, ValveBasis};
use crate::network::{Network, NetworkError, NetworkTopology};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error("model file has no pipe resistance for edge {0:?}")]
    MissingPipe(String),
    #[error("model file names unknown edge {0:?}")]
    UnknownEdge(String),
    #[error("model file names unknown consumer {0:?}")]
    UnknownConsumer(String),
    #[error("basis index {index} out of range for consumer {consumer:?} (basis has {len} entries)")]
    BasisIndex {
        consumer: String,
        index: usize,
        len: usize,
    },
    #[error("unknown built-in preset {0:?}")]
    UnknownPreset(String),
}

/// Topology given inline or as a path relative to the model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Inline(NetworkTopology),
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisDef {
    Grid(GridDef),
    /// Explicit `[a, b, c]` triples.
    Explicit(Vec<[f64; 3]>),
}

/// On-disk form of a [`HydraulicModel`]. Valve weights are sparse
/// `[basis index, weight]` pairs keyed by consumer id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub topology: TopologyRef,
    pub pipes: BTreeMap<String, f64>,
    pub basis: BasisDef,
    pub theta: BTreeMap<String, Vec<(usize, f64)>>,
    #[serde(default)]
    pub delta: f64,
}

impl ModelFile {
    pub fn from_model(model: &HydraulicModel<f64>, name: &str) -> Self {
        let net = model.network();
        let pipes = (0..net.edge_count())
            .map(|j| (net.edge_id(j).to_string(), model.pipe_s()[j]))
            .collect();
        let basis = match model.basis().grid() {
            Some(g) => BasisDef::Grid(g.clone()),
            None => BasisDef::Explicit(
                model
                    .basis()
                    .specs()
                    .iter()
                    .map(|s| [s.a(), s.b(), s.c()])
                    .collect(),
            ),
        };
        let theta = model
            .theta()
            .iter()
            .enumerate()
            .map(|(i, th)| {
                let pairs = th
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(k, &w)| (k, w))
                    .collect();
                (net.consumer_id(i).to_string(), pairs)
            })
            .collect();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            name: name.to_string(),
            topology: TopologyRef::Inline(net.topology().clone()),
            pipes,
            basis,
            theta,
            delta: model.delta(),
        }
    }

    /// Builds the model; relative topology paths resolve against `base_dir`.
    pub fn into_model(self, base_dir: Option<&Path>) -> Result<HydraulicModel<f64>, ModelFileError> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelFileError::Version(self.format_version));
        }
        let topology = match self.topology {
            TopologyRef::Inline(t) => t,
            TopologyRef::Path(p) => {
                let p = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p,
                };
                NetworkTopology::load(p)?
            }
        };
        let network = Network::new(topology)?;
        let basis: ValveBasis<f64> = match &self.basis {
            BasisDef::Grid(g) => basis_grid(&g.a, &g.b, &g.c)?,
            BasisDef::Explicit(list) => ValveBasis::new(
                list.iter()
                    .map(|&[a, b, c]| RampSpec::new(a, b, c))
                    .collect::<Result<_, _>>()?,
            )?,
        };
        for id in self.pipes.keys() {
            if network.edge_index(id).is_none() {
                return Err(ModelFileError::UnknownEdge(id.clone()));
            }
        }
        let mut pipe_s = Vec::with_capacity(network.edge_count());
        for j in 0..network.edge_count() {
            let id = network.edge_id(j);
            let s = self
                .pipes
                .get(id)
                .ok_or_else(|| ModelFileError::MissingPipe(id.to_string()))?;
            pipe_s.push(*s);
        }
        let mut theta = vec![vec![0.0; basis.len()]; network.consumer_count()];
        for (id, pairs) in &self.theta {
            let i = network
                .consumer_index(id)
                .ok_or_else(|| ModelFileError::UnknownConsumer(id.clone()))?;
            for &(k, w) in pairs {
                if k >= basis.len() {
                    return Err(ModelFileError::BasisIndex {
                        consumer: id.clone(),
                        index: k,
                        len: basis.len(),
                    });
                }
                theta[i][k] = w;
            }
        }
        Ok(HydraulicModel::new(network, pipe_s, basis, theta, self.delta)?)
    }
}

pub fn parse_model(json: &str, base_dir: Option<&Path>) -> Result<HydraulicModel<f64>, ModelFileError> {
    let file: ModelFile = serde_json::from_str(json)?;
    file.into_model(base_dir)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HydraulicModel<f64>, ModelFileError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text, path.parent())
}

pub fn save_model(
    model: &HydraulicModel<f64>,
    name: &str,
    path: impl AsRef<Path>,
) -> Result<(), ModelFileError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&ModelFile::from_model(model, name))?;
    fs::write(path, text + "\n").map_err(|source| ModelFileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fitted models shipped with the crate: the three structures trained on the
/// exciting dataset and model C trained on the realistic dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FittedPreset {
    ModelAExciting,
    ModelBExciting,
    ModelCExciting,
    ModelCRealistic,
}

impl FittedPreset {
    pub const ALL: [FittedPreset; 4] = [
        FittedPreset::ModelAExciting,
        FittedPreset::ModelBExciting,
        FittedPreset::ModelCExciting,
        FittedPreset::ModelCRealistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FittedPreset::ModelAExciting => "model-A-exciting",
            FittedPreset::ModelBExciting => "model-B-exciting",
            FittedPreset::ModelCExciting => "model-C-exciting",
            FittedPreset::ModelCRealistic => "model-C-realistic",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, ModelFileError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| ModelFileError::UnknownPreset(name.to_string()))
    }

    pub fn json(self) -> &'static str {
        match self {
            FittedPreset::ModelAExciting => include_str!("../presets/model_a_exciting.json"),
            FittedPreset::ModelBExciting => include_str!("../presets/model_b_exciting.json"),
            FittedPreset::ModelCExciting => include_str!("../presets/model_c_exciting.json"),
            FittedPreset::ModelCRealistic => include_str!("../presets/model_c_realistic.json"),
        }
    }

    pub fn load(self) -> HydraulicModel<f64> {
        parse_model(self.json(), None).expect("shipped preset is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        for p in FittedPreset::ALL {
            let m = p.load();
            assert_eq!(m.consumer_count(), 4);
            assert_eq!(m.pipe_s().len(), 7);
        }
        let a = FittedPreset::ModelAExciting.load();
        assert_eq!(a.basis().len(), 1);
        assert_eq!(a.theta()[3], vec![0.16]);
        let c = FittedPreset::ModelCExciting.load();
        assert_eq!(c.delta(), 0.015);
        assert_eq!(c.pipe_s()[3], 0.015);
    }

    #[test]
    fn round_trip_through_json() {
        let m = FittedPreset::ModelBExciting.load();
        let text = serde_json::to_string(&ModelFile::from_model(&m, "x")).unwrap();
        let back = parse_model(&text, None).unwrap();
        assert_eq!(back.theta(), m.theta());
        assert_eq!(back.pipe_s(), m.pipe_s());
        assert_eq!(back.basis(), m.basis());
    }

    #[test]
    fn explicit_basis_and_bad_index() {
        let topo = NetworkTopology::four_consumer_line().to_json_string();
        let good = format!(
            r#"{{"format_version":1,"topology":{topo},"pipes":{{"1":0,"2":0,"3":0,"4":0,"5":0.1,"6":0,"7":0}},
            "basis":{{"explicit":[[0.1,0.9,1.0],[0.0,1.0,1.0]]}},"theta":{{"2":[[1,0.5]]}}}}"#
        );
        let m = parse_model(&good, None).unwrap();
        assert_eq!(m.theta()[1], vec![0.0, 0.5]);
        assert_eq!(m.theta()[0], vec![0.0, 0.0]);
        let bad = good.replace("[[1,0.5]]", "[[2,0.5]]");
        assert!(matches!(
            parse_model(&bad, None),
            Err(ModelFileError::BasisIndex { index: 2, .. })
        ));
        let missing = good.replace(r#""5":0.1,"#, "");
        assert!(matches!(
            parse_model(&missing, None),
            Err(ModelFileError::MissingPipe(_))
        ));
    }

    #[test]
    fn preset_names() {
        assert_eq!(
            FittedPreset::from_name("model-c-exciting").unwrap(),
            FittedPreset::ModelCExciting
        );
        assert!(FittedPreset::from_name("model-D").is_err());
    }
}
