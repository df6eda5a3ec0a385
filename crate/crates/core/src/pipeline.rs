//! A trained model bundle and the proposal pipeline:
//! forward → decode → (adjust) → (rank) → Soft-NMS.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::data::VideoRecord;
use crate::eval::ProposalMap;
use crate::exec::{self, Execution};
use crate::interval::{sort_by_score, ScoredInterval};
use crate::network::{decode, NetworkConfig, RapNet};
use crate::postprocess::{
    adjust_boundaries, soft_nms, tag_group, AdjustConfig, Ranker, RankerConfig, SoftNmsConfig, DEFAULT_TAG_THRESHOLDS,
    RANKER_PREFIX,
};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub adjust: bool,
    pub rank: bool,
    pub adjust_cfg: AdjustConfig,
    pub nms: SoftNmsConfig,
    pub tag_thresholds: Vec<f64>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            adjust: true,
            rank: true,
            adjust_cfg: AdjustConfig::default(),
            nms: SoftNmsConfig::default(),
            tag_thresholds: DEFAULT_TAG_THRESHOLDS.to_vec(),
        }
    }
}

impl PostprocessConfig {
    /// Decode and Soft-NMS only.
    pub fn base() -> Self {
        Self {
            adjust: false,
            rank: false,
            ..Self::default()
        }
    }
}

/// Architecture description stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub network: NetworkConfig,
    pub anchors: AnchorSet,
    pub ranker: RankerConfig,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub net: RapNet,
    pub ranker: Ranker,
    pub store: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec, store: ParamStore) -> Result<Self> {
        if spec.anchors.depth != spec.network.depth || spec.anchors.per_cell != spec.network.anchors_per_cell {
            return Err(Error::Config(format!(
                "anchors are {}x{} but the network is N={} M={}",
                spec.anchors.depth, spec.anchors.per_cell, spec.network.depth, spec.network.anchors_per_cell
            )));
        }
        let net = RapNet::new(spec.network)?;
        let ranker = Ranker::new(spec.ranker)?;
        Ok(Self {
            spec,
            net,
            ranker,
            store,
        })
    }

    /// Freshly initialized network parameters (no ranker).
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let net = RapNet::new(spec.network)?;
        let store = net.init_params(seed);
        Self::new(spec, store)
    }

    pub fn has_ranker(&self) -> bool {
        self.store.names().any(|n| n.starts_with(RANKER_PREFIX))
    }

    pub fn spec_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }

    /// Writes the parameters to `path` and the spec to `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&self.store, &mut w)?;
        w.flush()?;
        let mut s = BufWriter::new(File::create(Self::spec_path(path))?);
        serde_json::to_writer_pretty(&mut s, &self.spec)?;
        s.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_reader(BufReader::new(File::open(Self::spec_path(path))?))?;
        spec.anchors.validate()?;
        let mut model = Self::init(spec, 0)?;
        let records = read_checkpoint(BufReader::new(File::open(path)?))?;
        let has_ranker = records.keys().any(|k| k.starts_with(RANKER_PREFIX));
        if has_ranker {
            model.ranker.init(&mut model.store, 0);
        }
        model.store.load_records(records)?;
        Ok(model)
    }

    /// Proposals for one video after the configured post-processing, at most `nms.top_k`.
    pub fn propose_video(&self, features: &Tensor, pp: &PostprocessConfig) -> Result<Vec<ScoredInterval>> {
        let (raw, p_a) = self.net.predict(&self.store, features)?;
        let mut props = decode(&raw, &self.spec.anchors, self.spec.network.t);
        if pp.adjust {
            let tag = tag_group(&p_a, &pp.tag_thresholds);
            props = adjust_boundaries(&props, &tag, pp.adjust_cfg);
        }
        if pp.rank {
            if !self.has_ranker() {
                return Err(Error::Config(
                    "ranking requested but the checkpoint has no ranker".into(),
                ));
            }
            props = self.ranker.rank(&self.store, &props, &p_a)?;
        }
        sort_by_score(&mut props);
        Ok(soft_nms(&props, pp.nms))
    }
}

pub fn propose(model: &Model, videos: &[&VideoRecord], pp: &PostprocessConfig, exec: Execution) -> Result<ProposalMap> {
    let lists = exec::try_map(exec, videos, |v| model.propose_video(&v.features, pp))?;
    Ok(videos.iter().map(|v| v.id.clone()).zip(lists).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, write_proposals, SynthConfig};

    fn model(use_ram: bool) -> Model {
        let network = NetworkConfig {
            t: 32,
            c: 8,
            depth: 3,
            use_ram,
            ..NetworkConfig::desk()
        };
        let anchors = AnchorSet::from_sorted(3, 2, vec![0.05, 0.08, 0.15, 0.25, 0.4, 0.6]).unwrap();
        let mut m = Model::init(
            ModelSpec {
                network,
                anchors,
                ranker: RankerConfig {
                    use_ram,
                    ..Default::default()
                },
            },
            1,
        )
        .unwrap();
        let mut rs = ParamStore::new();
        m.ranker.init(&mut rs, 2);
        m.store.merge_prefixed(&rs, RANKER_PREFIX);
        m
    }

    fn csv(map: &ProposalMap) -> String {
        let mut buf = Vec::new();
        write_proposals(map, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn flag_combinations_give_distinct_bounded_output() {
        let data = synth_dataset(&SynthConfig {
            num_videos: 4,
            t: 32,
            c: 8,
            ..Default::default()
        })
        .unwrap();
        let videos: Vec<&VideoRecord> = data.videos.iter().collect();
        let m = model(true);
        let base = PostprocessConfig::base();
        let adj = PostprocessConfig {
            adjust: true,
            ..base.clone()
        };
        let full = PostprocessConfig::default();
        let outs: Vec<ProposalMap> = [&base, &adj, &full]
            .iter()
            .map(|pp| propose(&m, &videos, pp, Execution::Parallel).unwrap())
            .collect();
        for out in &outs {
            for props in out.values() {
                assert!(props.len() <= 100);
                assert!(props
                    .iter()
                    .all(|p| 0.0 <= p.interval.start && p.interval.start < p.interval.end && p.interval.end <= 1.0));
            }
        }
        let texts: Vec<String> = outs.iter().map(csv).collect();
        assert_ne!(texts[0], texts[1]);
        assert_ne!(texts[1], texts[2]);
        let again = propose(&m, &videos, &full, Execution::Sequential).unwrap();
        assert_eq!(csv(&again), texts[2]);
    }

    #[test]
    fn ranking_without_ranker_is_an_error() {
        let m = Model::init(model(true).spec, 0).unwrap();
        assert!(!m.has_ranker());
        let x = Tensor::zeros(&[32, 8]);
        assert!(m.propose_video(&x, &PostprocessConfig::default()).is_err());
        assert!(m.propose_video(&x, &PostprocessConfig::base()).is_ok());
    }

    #[test]
    fn save_load_round_trip_without_ram() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model(false);
        m.save(&path).unwrap();
        assert!(Model::spec_path(&path).exists());
        let back = Model::load(&path).unwrap();
        assert_eq!(back.spec, m.spec);
        assert!(back.has_ranker());
        assert!(!back.store.names().any(|n| n.contains(".ram.")));
        for (name, t, _) in m.store.iter() {
            assert_eq!(t, back.store.get(name).unwrap());
        }
        let a = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(a, std::fs::read(&path).unwrap());
    }
}
