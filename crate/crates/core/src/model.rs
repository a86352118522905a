//! The saved-model union and its artifact round trip.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::InteractionList;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::gbdt::GbdtModel;
use crate::losses::{LossConfig, LossKind};
use crate::metrics::Scorer;
use crate::rankers::{ArchitectureKind, NeuralRanker, ScoreVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub ranker: NeuralRanker,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RankingModel {
    Neural(NeuralModel),
    Gbdt(GbdtModel),
}

impl RankingModel {
    pub fn schema(&self) -> &FeatureSchema {
        match self {
            RankingModel::Neural(m) => &m.ranker.embedder.schema,
            RankingModel::Gbdt(m) => &m.schema,
        }
    }

    /// Loss and architecture of a neural model.
    pub fn grid_position(&self) -> Option<(LossKind, ArchitectureKind)> {
        match self {
            RankingModel::Neural(m) => Some((m.loss.kind, m.ranker.kind())),
            RankingModel::Gbdt(_) => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            RankingModel::Neural(m) => format!("{} / {} loss", m.ranker.kind(), m.loss.kind.label()),
            RankingModel::Gbdt(m) => format!("lambdamart ({} trees)", m.ensemble.trees.len()),
        }
    }

    pub fn check_schema(&self, data: &FeatureSchema) -> Result<()> {
        self.schema().check_compatible(data)
    }

    pub fn score(&self, list: &InteractionList) -> Result<ScoreVector> {
        match self {
            RankingModel::Neural(m) => m.ranker.score(&list.context, &list.products),
            RankingModel::Gbdt(m) => m.score(list),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, artifact::Kind::Model, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::InvalidInput(format!("model artifact {} does not exist", path.display())));
        }
        artifact::read_file(path, artifact::Kind::Model)
    }
}

impl Scorer for RankingModel {
    fn score_list(&self, _index: usize, list: &InteractionList) -> Result<ScoreVector> {
        self.score(list)
    }
}

impl Scorer for NeuralRanker {
    fn score_list(&self, _index: usize, list: &InteractionList) -> Result<ScoreVector> {
        self.score(&list.context, &list.products)
    }
}
