//! Analytic parameter accounting per sharing configuration, without
//! instantiating any tensors.
//!
//! Conventions (matched by the model): attention sets carry four `[d, d]`
//! projections with biases, the feed-forward pair `[d, f]`/`[f, d]` carries
//! biases, layer norms a gain/bias pair each, embeddings no bias, and the
//! output projection reuses the embedding shape with no bias. Counts cover
//! trainable scalars only; the sinusoidal position signal is parameter-free.

use crate::model::{HyperParams, SharingConfig};

/// Scalar counts by role. Shared roles count zero: under embedding sharing
/// the decoder embedding and output projection fold into `embedding`; under
/// encoder-decoder sharing the decoder layer roles fold into the encoder's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountBreakdown {
    pub embedding: usize,
    pub output_projection: usize,
    pub encoder_attn: usize,
    pub encoder_ffn: usize,
    pub encoder_ln: usize,
    pub decoder_self_attn: usize,
    pub decoder_cross_attn: usize,
    pub decoder_ffn: usize,
    pub decoder_ln: usize,
    pub total: usize,
}

fn attn_set(d: usize) -> usize {
    4 * (d * d + d)
}

fn ffn_set(d: usize, f: usize) -> usize {
    d * f + f + f * d + d
}

fn ln_set(d: usize) -> usize {
    2 * d
}

/// Counts every physical tensor exactly once for the given configuration.
pub fn count(config: &SharingConfig, hyper: &HyperParams) -> CountBreakdown {
    let d = hyper.model_dim;
    let f = hyper.ffn_dim;
    let v = hyper.vocab_rows;
    let layers = if config.layer_sharing { 1 } else { hyper.num_layers };

    let embedding = if config.embedding_sharing { v * d } else { 2 * v * d };
    let output_projection = if config.embedding_sharing { 0 } else { v * d };

    let encoder_attn = layers * attn_set(d);
    let encoder_ffn = layers * ffn_set(d, f);
    let encoder_ln = layers * 2 * ln_set(d);

    let (decoder_self_attn, decoder_cross_attn, decoder_ffn, decoder_ln) =
        if config.encoder_decoder_sharing {
            (0, 0, 0, 0)
        } else {
            (
                layers * attn_set(d),
                layers * attn_set(d),
                layers * ffn_set(d, f),
                layers * 3 * ln_set(d),
            )
        };

    let total = embedding
        + output_projection
        + encoder_attn
        + encoder_ffn
        + encoder_ln
        + decoder_self_attn
        + decoder_cross_attn
        + decoder_ffn
        + decoder_ln;
    CountBreakdown {
        embedding,
        output_projection,
        encoder_attn,
        encoder_ffn,
        encoder_ln,
        decoder_self_attn,
        decoder_cross_attn,
        decoder_ffn,
        decoder_ln,
        total,
    }
}

pub fn percent_of_baseline(config: &SharingConfig, hyper: &HyperParams) -> f64 {
    let baseline = count(&SharingConfig::none(), hyper).total;
    100.0 * count(config, hyper).total as f64 / baseline as f64
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub name: String,
    pub params: usize,
    pub percent: f64,
}

/// Comparison rows: the all-off baseline first, then the given
/// configurations in order, each with its percent of the baseline total.
pub fn table(configs: &[SharingConfig], hyper: &HyperParams) -> Vec<TableRow> {
    assert!(!configs.is_empty(), "table needs at least one configuration");
    let baseline_total = count(&SharingConfig::none(), hyper).total;
    let mut rows = vec![TableRow {
        name: "baseline".to_string(),
        params: baseline_total,
        percent: 100.0,
    }];
    for cfg in configs {
        if *cfg == SharingConfig::none() {
            continue;
        }
        let total = count(cfg, hyper).total;
        rows.push(TableRow {
            name: cfg.label(),
            params: total,
            percent: 100.0 * total as f64 / baseline_total as f64,
        });
    }
    rows
}

/// Millions with one decimal, the usual reporting format.
pub fn format_millions(params: usize) -> String {
    format!("{:.1}M", params as f64 / 1.0e6)
}

pub fn format_table(rows: &[TableRow]) -> String {
    let mut out = String::from("configuration        params      percent\n");
    for r in rows {
        out.push_str(&format!(
            "{:<20} {:>8}    {:>6.1}%\n",
            r.name,
            format_millions(r.params),
            r.percent
        ));
    }
    out
}

pub fn format_records(rows: &[TableRow]) -> String {
    let mut out = String::from("name,params,percent\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.2}\n", r.name, r.params, r.percent));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn paper_hyper() -> HyperParams {
        // 30000 tokens on either side plus the eight shared specials.
        HyperParams {
            num_layers: 6,
            model_dim: 1024,
            num_heads: 16,
            ffn_dim: 4096,
            vocab_rows: 30008,
            max_len: 256,
        }
    }

    fn es() -> SharingConfig {
        SharingConfig { embedding_sharing: true, ..SharingConfig::none() }
    }

    fn eds() -> SharingConfig {
        SharingConfig { encoder_decoder_sharing: true, ..SharingConfig::none() }
    }

    fn all_on() -> SharingConfig {
        SharingConfig {
            embedding_sharing: true,
            encoder_decoder_sharing: true,
            layer_sharing: true,
        }
    }

    #[test]
    fn baseline_near_reference_size() {
        let total = count(&SharingConfig::none(), &paper_hyper()).total;
        let m = total as f64 / 1e6;
        // 270.8M within two percent.
        assert!((m - 270.8).abs() / 270.8 < 0.02, "baseline {m:.1}M");
    }

    #[test]
    fn percents_match_reference_table() {
        let hyper = paper_hyper();
        let cases = [
            (es(), 76.7),
            (eds(), 62.8),
            (SharingConfig::representor(), 39.5),
            (all_on(), 16.6),
        ];
        for (cfg, expected) in cases {
            let pct = percent_of_baseline(&cfg, &hyper);
            assert!(
                (pct - expected).abs() <= 1.5,
                "{}: {pct:.2}% vs {expected}%",
                cfg.label()
            );
        }
    }

    #[test]
    fn analytic_equals_instantiated_for_all_configs() {
        let hyper = HyperParams {
            num_layers: 3,
            model_dim: 12,
            num_heads: 3,
            ffn_dim: 17,
            vocab_rows: 29,
            max_len: 16,
        };
        for cfg in SharingConfig::all_combinations() {
            let analytic = count(&cfg, &hyper).total;
            let store = init_params(&cfg, &hyper, 5).unwrap();
            assert_eq!(analytic, store.total_scalars(), "{}", cfg.label());
        }
    }

    #[test]
    fn breakdown_sums_to_total() {
        let hyper = paper_hyper();
        for cfg in SharingConfig::all_combinations() {
            let b = count(&cfg, &hyper);
            let sum = b.embedding
                + b.output_projection
                + b.encoder_attn
                + b.encoder_ffn
                + b.encoder_ln
                + b.decoder_self_attn
                + b.decoder_cross_attn
                + b.decoder_ffn
                + b.decoder_ln;
            assert_eq!(sum, b.total);
        }
    }

    #[test]
    fn sharing_never_increases_count() {
        let hyper = paper_hyper();
        for cfg in SharingConfig::all_combinations() {
            let base = count(&cfg, &hyper).total;
            for flip in 0..3 {
                let mut on = cfg;
                match flip {
                    0 => on.embedding_sharing = true,
                    1 => on.encoder_decoder_sharing = true,
                    _ => on.layer_sharing = true,
                }
                assert!(count(&on, &hyper).total <= base);
            }
        }
    }

    #[test]
    fn table_layout() {
        let hyper = paper_hyper();
        let rows = table(
            &[es(), eds(), SharingConfig::representor(), all_on()],
            &hyper,
        );
        assert_eq!(rows[0].name, "baseline");
        assert!((rows[0].percent - 100.0).abs() < 1e-12);
        assert_eq!(rows[1].name, "ES");
        assert_eq!(rows[2].name, "EDS");
        assert_eq!(rows[3].name, "ES+EDS");
        assert_eq!(rows[4].name, "ES+EDS+LS");
        let text = format_table(&rows);
        assert!(text.contains("baseline"));
        assert!(format_millions(rows[0].params).ends_with('M'));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn analytic_matches_registry_at_arbitrary_hyperparameters(
            layers in 1usize..4,
            heads in 1usize..4,
            dh in 1usize..5,
            ffn in 1usize..24,
            vocab in 9usize..40,
            bits in 0u8..8,
        ) {
            let hyper = HyperParams {
                num_layers: layers,
                model_dim: heads * dh,
                num_heads: heads,
                ffn_dim: ffn,
                vocab_rows: vocab,
                max_len: 16,
            };
            let cfg = SharingConfig {
                embedding_sharing: bits & 1 != 0,
                encoder_decoder_sharing: bits & 2 != 0,
                layer_sharing: bits & 4 != 0,
            };
            let analytic = count(&cfg, &hyper).total;
            let store = init_params(&cfg, &hyper, 1).unwrap();
            prop_assert_eq!(analytic, store.total_scalars());
        }
    }
}
