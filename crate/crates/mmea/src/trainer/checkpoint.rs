//! Checkpoints: a directory holding one binary matrix per parameter and
//! optimizer moment, the pivot ledger, and a key-value state file tying
//! them together.

use std::fs;
use std::path::Path;

use crate::encoders::{GcnParams, ModalityProjection, ModelParams};
use crate::error::{Error, Result};
use crate::kgdata::formats::{
    read_matrix, read_pivots, write_key_values, write_matrix, KeyValueFile,
};
use crate::kgdata::Modality;
use crate::numcore::Param;
use crate::seeding::PivotLedger;
use crate::trainer::{Moments, TrainState};

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut keys: Vec<(String, String)> = Vec::new();
    keys.push(("epoch".into(), state.epoch.to_string()));
    keys.push(("step".into(), state.step.to_string()));
    keys.push(("rounds".into(), state.ledger.rounds().to_string()));
    let modality_names: Vec<&str> = state
        .params
        .modalities
        .iter()
        .map(|m| m.name())
        .collect();
    keys.push(("modalities".into(), modality_names.join(",")));

    for ((name, param), moments) in state.params.named().into_iter().zip(&state.moments) {
        let value_file = format!("param.{name}.mmea");
        write_matrix(&dir.join(&value_file), &param.value)?;
        keys.push((format!("param.{name}"), value_file));
        let m_file = format!("moment.{name}.m.mmea");
        let v_file = format!("moment.{name}.v.mmea");
        write_matrix(&dir.join(&m_file), &moments.m)?;
        write_matrix(&dir.join(&v_file), &moments.v)?;
        keys.push((format!("moment.{name}.m"), m_file));
        keys.push((format!("moment.{name}.v"), v_file));
    }

    let permanent_file = "ledger.permanent.tsv";
    crate::kgdata::formats::write_pivots(&dir.join(permanent_file), state.ledger.permanent())?;
    keys.push(("ledger.permanent".into(), permanent_file.into()));
    let mut candidates = String::new();
    for (s, t, streak) in state.ledger.candidate_list() {
        candidates.push_str(&format!("{s}\t{t}\t{streak}\n"));
    }
    let candidates_file = "ledger.candidates.tsv";
    fs::write(dir.join(candidates_file), candidates)
        .map_err(|e| Error::io(dir.join(candidates_file), e))?;
    keys.push(("ledger.candidates".into(), candidates_file.into()));

    keys.sort();
    write_key_values(&dir.join("params.manifest"), &keys)
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub moments: Vec<Moments>,
    pub epoch: usize,
    pub step: usize,
    pub ledger: PivotLedger,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = KeyValueFile::parse(&dir.join("params.manifest"))?;
    let epoch: usize = manifest.parsed_or("epoch", 0)?;
    let step: usize = manifest.parsed_or("step", 0)?;
    let rounds: usize = manifest.parsed_or("rounds", 0)?;
    let modalities: Vec<Modality> = manifest
        .require("modalities")?
        .split(',')
        .map(|name| {
            Modality::from_name(name.trim())
                .ok_or_else(|| Error::format(&manifest.path, format!("unknown modality '{name}'")))
        })
        .collect::<Result<_>>()?;

    let load_param = |name: &str| -> Result<Param> {
        Ok(Param::new(read_matrix(
            &manifest.path_value(&format!("param.{name}"))?,
        )?))
    };

    let structure = if modalities.contains(&Modality::Structure) {
        let entity_table = load_param("entity_table")?;
        let mut layer_weights = Vec::new();
        let mut l = 0;
        while manifest.get(&format!("param.gcn.{l}")).is_some() {
            layer_weights.push(load_param(&format!("gcn.{l}"))?);
            l += 1;
        }
        Some(GcnParams {
            entity_table,
            layer_weights,
        })
    } else {
        None
    };
    let mut projections = Vec::new();
    for &m in &modalities {
        if m == Modality::Structure {
            continue;
        }
        projections.push(ModalityProjection {
            modality: m,
            weight: load_param(&format!("proj.{}.weight", m.name()))?,
            bias: load_param(&format!("proj.{}.bias", m.name()))?,
        });
    }
    let modality_logits = load_param("modality_logits")?;
    let params = ModelParams {
        modalities,
        structure,
        projections,
        modality_logits,
    };

    let mut moments = Vec::new();
    for (name, _) in params.named() {
        moments.push(Moments {
            m: read_matrix(&manifest.path_value(&format!("moment.{name}.m"))?)?,
            v: read_matrix(&manifest.path_value(&format!("moment.{name}.v"))?)?,
        });
    }

    let permanent = read_pivots(&manifest.path_value("ledger.permanent")?)?;
    let mut ledger = PivotLedger::new(&permanent)?;
    let candidates_path = manifest.path_value("ledger.candidates")?;
    let text = fs::read_to_string(&candidates_path).map_err(|e| Error::io(&candidates_path, e))?;
    let mut candidates = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::format(&candidates_path, "expected s<TAB>t<TAB>streak"));
        }
        let parse = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::format(&candidates_path, format!("bad number '{s}'")))
        };
        candidates.push((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
    }
    ledger.restore_candidates(&candidates, rounds);

    Ok(Checkpoint {
        params,
        moments,
        epoch,
        step,
        ledger,
    })
}
