use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Args;
use factkit_core::dataset::{self, PreferenceItem};
use factkit_core::types::{Granularity, Label};
use serde::Serialize;

use crate::config::{self, AppConfig};

#[derive(Args)]
pub struct LabelArgs {
    /// Assessed records from `evaluate`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    t_s: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Label this fraction of responses by precision and the rest by recall@K.
    #[arg(long)]
    rho: Option<f64>,
    /// General-domain items to shuffle in with the factuality items.
    #[arg(long)]
    general: Option<PathBuf>,
}

#[derive(Serialize)]
struct Inputs<'a> {
    input: &'a PathBuf,
    general: &'a Option<PathBuf>,
}

pub fn run(args: LabelArgs, mut cfg: AppConfig) -> Result<ExitCode> {
    config::apply(&mut cfg.label.t, args.t);
    config::apply(&mut cfg.label.t_s, args.t_s);
    config::apply(&mut cfg.label.k, args.k);
    config::apply(&mut cfg.label.rho, args.rho.map(Some));
    cfg.label.validate()?;

    let records = dataset::read_records(&args.input)?;
    let mut items = dataset::label_records(&records, &cfg.label)?;
    if let Some(general) = &args.general {
        items = dataset::mix_general(items, dataset::import_items(general)?, cfg.seed);
    }
    dataset::export_items(&args.output, &items)?;
    config::write_provenance(
        &args.output,
        "label",
        Inputs {
            input: &args.input,
            general: &args.general,
        },
        &cfg,
    )?;
    print_counts(&items);
    Ok(ExitCode::SUCCESS)
}

fn print_counts(items: &[PreferenceItem]) {
    let count = |g: Granularity, l: Label| items.iter().filter(|i| i.granularity == g && i.label == l).count();
    println!("{:>10} {:>8} {:>8}", "level", "chosen", "rejected");
    for (name, g) in [("response", Granularity::Response), ("sentence", Granularity::Sentence)] {
        println!("{:>10} {:>8} {:>8}", name, count(g, Label::Chosen), count(g, Label::Rejected));
    }
}
