use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use genefl::checkpoint;
use genefl::harness::{self, DataSource, ExperimentConfig, Mode};
use genefl::nn::{Layer, LayeredParams};
use genefl::privacy::{self, AttackConfig, AttackObservation};
use genefl::{data, rng};

#[derive(Parser)]
#[command(name = "genefl", version, about = "Dynamic agnostic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shared {
    Full,
    Gene,
}

#[derive(Subcommand)]
enum Command {
    /// Run both training phases and write metrics, ledger and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the layers, shapes and mask of a checkpoint or gene.
    InspectGene {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gradient-inversion attack on one sample against a model checkpoint.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_index: usize,
        /// CSV dataset; defaults to the synthetic data of a default config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        shared: Shared,
        /// Gene checkpoint whose layers are the shared surface for `--shared gene`.
        #[arg(long)]
        gene: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// Attacker does not know the unshared layers and uses a fresh init for them.
        #[arg(long)]
        blind: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "attack_out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> genefl::Result<()> {
    match cli.cmd {
        Command::Run { config, mode, seed, out } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            if let Some(m) = mode {
                cfg.mode = m.parse::<Mode>()?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let world = harness::run_experiment(cfg, &out)?;
            let last = world.metrics.last().unwrap();
            println!(
                "{} rounds, final mean accuracy {:.4}, uplink {} bytes -> {}",
                last.round,
                last.mean_test_accuracy,
                last.cumulative_uplink_bytes,
                out.display()
            );
        }
        Command::InspectGene { checkpoint: path } => {
            let bytes = std::fs::read(&path)?;
            let (header, _) = checkpoint::read_header(&bytes)?;
            for e in &header.layers {
                println!("{}\t{:?}\t{}\toffset {}", e.layer_id, e.shape, e.dtype, e.offset);
            }
            let desc = checkpoint::descriptor_path(&path);
            if desc.exists() {
                let gene = checkpoint::load_gene::<f32>(&path)?;
                println!("gamma {} origin {:?}", gene.gamma(), gene.origin);
                for (id, bit) in gene.mask() {
                    println!("  {}{id}", if *bit { "+" } else { "-" });
                }
            }
        }
        Command::Attack { checkpoint: path, image_index, data: csv, shared, gene, steps, blind, seed, out } => {
            let model: LayeredParams<f64> = checkpoint::load(&path)?;
            let dataset = match csv {
                Some(p) => data::load_csv(p)?,
                None => match ExperimentConfig::default() {
                    ExperimentConfig { data: DataSource::Synthetic { num_classes, per_class, input_dim }, seed, .. } => {
                        data::make_synthetic(num_classes, per_class, input_dim, rng::derive_seed(seed, "data", 0))?
                    }
                    _ => unreachable!("default data is synthetic"),
                },
            };
            if image_index >= dataset.len() {
                return Err(genefl::Error::Config(format!("image index {image_index} out of {} samples", dataset.len())));
            }
            let ids: Vec<String> = match (shared, gene) {
                (Shared::Full, _) => model.ids().map(String::from).collect(),
                (Shared::Gene, Some(g)) => checkpoint::load_gene::<f32>(g)?.layer_ids(),
                (Shared::Gene, None) => return Err(genefl::Error::Config("--shared gene needs --gene".into())),
            };
            let x: Vec<f64> = dataset.inputs.row(image_index).iter().map(|&v| f64::from(v)).collect();
            let y = dataset.labels[image_index];
            let attacker = if blind { privacy::blind_unshared(&model, &ids, seed)? } else { model.clone() };
            let obs = AttackObservation::observe(&model, attacker, &ids, &x, y)?;
            let rec = privacy::idlg_reconstruct(&obs, &AttackConfig { steps, ..Default::default() }, seed)?;
            let score = privacy::psnr(&x, &rec.x)?;

            std::fs::create_dir_all(&out)?;
            let tensor = Array2::from_shape_vec((1, rec.x.len()), rec.x.clone()).unwrap().into_dyn();
            checkpoint::save(out.join("recon.ckpt"), &LayeredParams::new(vec![Layer::new("recon", tensor)])?)?;
            let original = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap().into_dyn();
            checkpoint::save(out.join("original.ckpt"), &LayeredParams::new(vec![Layer::new("original", original)])?)?;
            let mut trace = String::from("step,l_d\n");
            for (i, l) in rec.trace.iter().enumerate() {
                trace.push_str(&format!("{i},{l}\n"));
            }
            std::fs::write(out.join("ld_trace.csv"), trace)?;
            println!("psnr_db {score:.4}\nl_d {:.6e}\nshared {}", rec.loss, ids.join(","));
        }
    }
    Ok(())
}
