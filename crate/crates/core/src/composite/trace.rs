use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::vocab::{TokenId, Vocabulary};

/// Per-token record of the composite model's decisions. Component vectors
/// `pi` and `act` cover entity components only; `att_logit`, `alpha` and
/// `log_p_components` start with the default model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub position: usize,
    pub prev: TokenId,
    pub token: TokenId,
    pub pi: Vec<f64>,
    pub act: Vec<bool>,
    pub att_logit: Vec<f64>,
    pub alpha: Vec<f64>,
    pub log_p_components: Vec<f64>,
    pub log_p: f64,
    pub log_p_default: f64,
}

/// One TSV row per token, with a header. `sentence` numbers the rows when
/// several sentences share a file.
pub fn write_traces_tsv<W: Write>(mut w: W, vocab: &Vocabulary, sentences: &[Vec<StepTrace>]) -> Result<()> {
    let n = sentences.iter().flatten().next().map_or(0, |t| t.pi.len());
    let mut header = vec!["sentence".to_string(), "position".into(), "token".into()];
    header.push("alpha_0".into());
    header.push("logp_0".into());
    for i in 1..=n {
        for col in ["pi", "act", "alpha", "logp"] {
            header.push(format!("{col}_{i}"));
        }
    }
    header.push("logp_composite".into());
    header.push("logp_default".into());
    writeln!(w, "{}", header.join("\t"))?;
    for (s, traces) in sentences.iter().enumerate() {
        for t in traces {
            let mut row = vec![
                s.to_string(),
                t.position.to_string(),
                vocab.subword(t.token)?.to_string(),
                t.alpha[0].to_string(),
                t.log_p_components[0].to_string(),
            ];
            for i in 0..n {
                row.push(t.pi[i].to_string());
                row.push(u8::from(t.act[i]).to_string());
                row.push(t.alpha[i + 1].to_string());
                row.push(t.log_p_components[i + 1].to_string());
            }
            row.push(t.log_p.to_string());
            row.push(t.log_p_default.to_string());
            writeln!(w, "{}", row.join("\t"))?;
        }
    }
    Ok(())
}

/// JSON array of sentences, each an array of [`StepTrace`] objects.
pub fn write_traces_json<W: Write>(w: W, sentences: &[Vec<StepTrace>]) -> Result<()> {
    serde_json::to_writer_pretty(w, sentences)?;
    Ok(())
}
