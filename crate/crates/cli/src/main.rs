//! Command-line driver: compare two weight bundles, forge synthetic models,
//! apply manipulation specs, and run the evaluation testbed.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 comparison failure,
//! 3 equivalence-verification failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use lineage_core::container::{load_bundle, save_bundle};
use lineage_core::eval::{run_testbed, Label, TestbedConfig};
use lineage_core::fingerprint::{compare, SimilarityReport};
use lineage_core::forge::{
    apply_manipulation, forward_reference, generate_base, max_abs_diff, ForgeConfig,
    ManipulationSpec, PermSpec, RotationSpec, SignSpec,
};

const EXIT_USAGE: u8 = 1;
const EXIT_COMPARE: u8 = 2;
const EXIT_EQUIVALENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "lineage",
    version,
    about = "Weight-based lineage fingerprinting for transformer bundles",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare two bundle files and print their similarity as a percentage
    Compare {
        path_a: PathBuf,
        path_b: PathBuf,
        /// Write the full similarity report (JSON) here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic bundle from a JSON config
    Forge { config: PathBuf, out: PathBuf },
    /// Apply a manipulation spec to a bundle
    Attack {
        input: PathBuf,
        spec: PathBuf,
        out: PathBuf,
        /// For noiseless specs, check that model outputs are unchanged
        #[arg(long)]
        verify_equivalence: bool,
    },
    /// Run the synthetic testbed and write its reports
    Eval { config: PathBuf, out_dir: PathBuf },
}

/// Provenance record written next to every report.
#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command_line: Vec<String>,
    input_digests: BTreeMap<String, String>,
    timestamp_unix: u64,
    seeds: BTreeMap<String, u64>,
}

impl RunManifest {
    fn new(inputs: &[&Path], seeds: BTreeMap<String, u64>) -> Result<Self, CliError> {
        let mut input_digests = BTreeMap::new();
        for path in inputs {
            input_digests.insert(path.display().to_string(), sha256_hex(path)?);
        }
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command_line: std::env::args().collect(),
            input_digests,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seeds,
        })
    }
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn comparison(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_COMPARE,
            message: message.into(),
        }
    }

    fn equivalence(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_EQUIVALENCE,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap would exit 2 on usage errors; this tool reserves 2 for
            // comparison failures
            if err.use_stderr() {
                eprintln!("{err}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };

    configure_threads();

    let result = match cli.command {
        Command::Compare { path_a, path_b, out } => cmd_compare(&path_a, &path_b, out.as_deref()),
        Command::Forge { config, out } => cmd_forge(&config, &out),
        Command::Attack {
            input,
            spec,
            out,
            verify_equivalence,
        } => cmd_attack(&input, &spec, &out, verify_equivalence),
        Command::Eval { config, out_dir } => cmd_eval(&config, &out_dir),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

/// FINGERPRINT_THREADS caps internal parallelism; 0 or unset means auto.
fn configure_threads() {
    if let Ok(value) = std::env::var("FINGERPRINT_THREADS") {
        if let Ok(threads) = value.trim().parse::<usize>() {
            if threads > 0 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

#[derive(Serialize)]
struct CompareOutput {
    #[serde(flatten)]
    report: SimilarityReport,
    manifest: RunManifest,
}

fn cmd_compare(path_a: &Path, path_b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let bundle_a =
        load_bundle(path_a).map_err(|e| CliError::usage(format!("{}: {e}", path_a.display())))?;
    let bundle_b =
        load_bundle(path_b).map_err(|e| CliError::usage(format!("{}: {e}", path_b.display())))?;
    let report = compare(&bundle_a, &bundle_b).map_err(|e| CliError::comparison(e.to_string()))?;

    println!("{:.2}", report.similarity * 100.0);

    if let Some(out_path) = out {
        let manifest = RunManifest::new(&[path_a, path_b], BTreeMap::new())?;
        let output = CompareOutput { report, manifest };
        write_json(out_path, &output)?;
    }
    Ok(())
}

fn cmd_forge(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let config: ForgeConfig = read_json(config_path)?;
    let bundle = generate_base(&config).map_err(|e| CliError::usage(e.to_string()))?;
    save_bundle(&bundle, out).map_err(|e| CliError::usage(e.to_string()))?;
    let manifest = RunManifest::new(
        &[config_path],
        BTreeMap::from([("seed".to_string(), config.seed)]),
    )?;
    write_json(&manifest_path(out), &manifest)?;
    Ok(())
}

fn cmd_attack(
    input: &Path,
    spec_path: &Path,
    out: &Path,
    verify_equivalence: bool,
) -> Result<(), CliError> {
    let base =
        load_bundle(input).map_err(|e| CliError::usage(format!("{}: {e}", input.display())))?;
    let spec: ManipulationSpec = read_json(spec_path)?;
    let attacked = apply_manipulation(&base, &spec).map_err(|e| CliError::usage(e.to_string()))?;

    if verify_equivalence && spec.is_noiseless() {
        verify_outputs_match(&base, &attacked)?;
    }

    save_bundle(&attacked, out).map_err(|e| CliError::usage(e.to_string()))?;
    let mut seeds = BTreeMap::from([("noise_seed".to_string(), spec.noise_seed)]);
    if let Some(PermSpec::Seed(s)) = &spec.perm_seed {
        seeds.insert("perm_seed".to_string(), *s);
    }
    if let Some(SignSpec::Seed(s)) = &spec.sign_seed {
        seeds.insert("sign_seed".to_string(), *s);
    }
    if let Some(RotationSpec::Seed(s)) = &spec.rotation_seed {
        seeds.insert("rotation_seed".to_string(), *s);
    }
    let manifest = RunManifest::new(&[input, spec_path], seeds)?;
    write_json(&manifest_path(out), &manifest)?;
    Ok(())
}

/// Probes both models on fixed seeded token sequences and fails when the
/// logits diverge materially.
fn verify_outputs_match(
    base: &lineage_core::bundle::WeightBundle,
    attacked: &lineage_core::bundle::WeightBundle,
) -> Result<(), CliError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5EED);
    let vocab = base.vocab_size();
    let mut worst: f64 = 0.0;
    for _ in 0..8 {
        let tokens: Vec<usize> = (0..12).map(|_| rng.gen_range(0..vocab)).collect();
        let a = forward_reference(base, &tokens)
            .map_err(|e| CliError::usage(format!("forward pass on input bundle: {e}")))?;
        let b = forward_reference(attacked, &tokens)
            .map_err(|e| CliError::usage(format!("forward pass on attacked bundle: {e}")))?;
        worst = worst.max(max_abs_diff(&a.logits, &b.logits));
    }
    if worst >= 1e-6 {
        return Err(CliError::equivalence(format!(
            "maximum logit divergence {worst:e} is not below 1e-6"
        )));
    }
    Ok(())
}

fn cmd_eval(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let config: TestbedConfig = read_json(config_path)?;
    let outcome = run_testbed(&config).map_err(|e| CliError::usage(e.to_string()))?;

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::usage(format!("{}: {e}", out_dir.display())))?;

    write_json(&out_dir.join("report.json"), &outcome.report)?;

    let mut roc_csv = String::from("fpr,tpr\n");
    for (fpr, tpr) in &outcome.report.roc {
        roc_csv.push_str(&format!("{fpr},{tpr}\n"));
    }
    write_text(&out_dir.join("roc.csv"), &roc_csv)?;

    let mut scores_csv = String::from("pair_id,label,category,similarity,error\n");
    for entry in &outcome.scores.entries {
        let label = match entry.label {
            Label::Positive => "positive",
            Label::Negative => "negative",
        };
        scores_csv.push_str(&format!(
            "{},{},{},{},\n",
            entry.pair_id, label, entry.category, entry.similarity
        ));
    }
    for failure in &outcome.failures {
        scores_csv.push_str(&format!(
            "{},,,,{}\n",
            failure.pair_id,
            csv_escape(&failure.message)
        ));
    }
    write_text(&out_dir.join("scores.csv"), &scores_csv)?;

    let manifest = RunManifest::new(
        &[config_path],
        BTreeMap::from([
            ("model_seed".to_string(), config.model.seed),
            ("negative_seed".to_string(), config.negative_seed),
        ]),
    )?;
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    println!(
        "auc {:.4} pauc {:.4} tpr@1%fpr {:.4} pairs {} failures {}",
        outcome.report.auc,
        outcome.report.pauc,
        outcome.report.tpr_at_1pct_fpr,
        outcome.scores.entries.len(),
        outcome.failures.len()
    );
    Ok(())
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::usage(format!("serializing {}: {e}", path.display())))?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}
