//! `gridveil`: command-line front end for the privacy toolkit.
//!
//! Meter CSVs are `meter_id,timestamp,kwh` rows; energy is validated against
//! `--delta-max-kwh` at ingest.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gridveil_core::anonymize::{pseudonymize_csv, PseudonymKey};
use gridveil_core::dp::{dp_count, dp_histogram, dp_mean, dp_sum, BudgetLedger, DpAnswer, HistogramSpec, PrivacyParams};
use gridveil_core::fedlearn::{run_federation, shard_round_robin, Aggregation, RoundConfig};
use gridveil_core::gateway::{read_jsonl, serve, verify_chain, AuditLog, DataStore, Gateway, PolicyConfig};
use gridveil_core::he::{keygen, PaillierKeypair, PublicKeyFile, RateSchedule, SecretKeyFile, DEFAULT_KEY_BITS};
use gridveil_core::meterdata::{
    format_timestamp, parse_csv, parse_timestamp, write_csv, EnergyQuantity, FeederDataset, IngestConfig,
};
use gridveil_core::smpc::{secure_sum, PartyId, PartyInput, SecureSumOutcome};
use gridveil_core::synthetic::{fidelity_report, fit, generate, privacy_check, DEFAULT_MEMORIZATION_THRESHOLD, HOURS};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "gridveil", version, about = "Privacy-preserving smart-meter analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct IngestArgs {
    /// Reading interval in seconds.
    #[arg(long, default_value_t = 3600)]
    interval_s: u32,
    /// Per-reading energy cap Δ in kWh; larger readings are rejected.
    #[arg(long, default_value_t = 5.0)]
    delta_max_kwh: f64,
}

impl IngestArgs {
    fn config(self) -> Result<IngestConfig> {
        Ok(IngestConfig::new(self.interval_s, EnergyQuantity::from_kwh_f64(self.delta_max_kwh))?)
    }

    fn load(self, path: &Path) -> Result<FeederDataset> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        parse_csv(BufReader::new(file), &self.config()?).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DpOp {
    Sum,
    Count,
    Mean,
    Histogram,
}

#[derive(Subcommand)]
enum Command {
    /// Replace meter ids with keyed pseudonyms.
    Anonymize {
        #[arg(long)]
        epoch: u64,
        /// File holding exactly 32 raw key bytes.
        #[arg(long)]
        key_file: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Differentially private feeder statistics, one answer per interval.
    DpQuery {
        #[arg(long, value_enum)]
        op: DpOp,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Append-only budget ledger (`query_id,epsilon,delta,timestamp`).
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        epsilon_cap: f64,
        /// Seed for reproducible noise; OS entropy when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to one interval (epoch seconds or ISO-8601); all intervals otherwise.
        #[arg(long)]
        timestamp: Option<String>,
        /// Histogram bins over [0, Δ].
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[command(flatten)]
        ingest: IngestArgs,
        input: PathBuf,
    },
    /// Fit cluster profiles to real data and generate synthetic households.
    SynthGen {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long)]
        households: usize,
        #[arg(long)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ingest: IngestArgs,
    },
    /// Fidelity and memorization report as key=value lines.
    SynthCheck {
        real: PathBuf,
        synth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MEMORIZATION_THRESHOLD)]
        threshold: f64,
        #[command(flatten)]
        ingest: IngestArgs,
    },
    /// Federated training over round-robin meter shards; prints per-round CSV.
    FedTrain {
        #[arg(long)]
        clients: usize,
        #[arg(long)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        local_steps: usize,
        #[arg(long)]
        lr: f64,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        dp_sigma: Option<f64>,
        #[arg(long)]
        secure_agg: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        ingest: IngestArgs,
        data: PathBuf,
    },
    /// Additive secret-sharing sum over `party_id,kwh` rows.
    SmpcSum {
        #[arg(long, default_value_t = 3)]
        min_participants: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the `from,to,value` message transcript.
        #[arg(long, default_value = "transcript.csv")]
        transcript: PathBuf,
        inputs: PathBuf,
    },
    /// Generate a Paillier keypair: public key to --out, secret key to --secret-out (mode 0600).
    HeKeygen {
        #[arg(long, default_value_t = DEFAULT_KEY_BITS)]
        bits: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out stem>.secret.json`.
        #[arg(long)]
        secret_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encrypt per-interval usage and compute the encrypted bill (hex on stdout).
    HeBill {
        #[arg(long = "pub")]
        public: PathBuf,
        /// One non-negative integer rate per line, per kWh.
        #[arg(long)]
        rates: PathBuf,
        /// Upper bound per interval in kWh, used for the overflow check.
        #[arg(long, default_value_t = 5.0)]
        max_usage_kwh: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// One kWh value per line, aligned with the rates.
        usage: PathBuf,
    },
    /// Decrypt a hex ciphertext with a secret key file.
    HeDecrypt {
        #[arg(long)]
        key: PathBuf,
        ciphertext: PathBuf,
    },
    /// Privacy gateway.
    Gateway {
        #[command(subcommand)]
        command: GatewayCommand,
    },
    /// Print an audit log, optionally verifying its hash chain.
    AuditShow {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Subcommand)]
enum GatewayCommand {
    /// JSON-lines request/decision loop on stdin/stdout.
    Serve {
        /// TOML policy file.
        #[arg(long)]
        policy: PathBuf,
        /// Directory with readings.csv and optional meters.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "audit.jsonl")]
        audit_log: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn rng_from(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

/// Non-empty, non-comment lines, skipping a non-numeric first line as a header.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines: Vec<(usize, String)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_owned()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if let Some((_, first)) = lines.first() {
        let head = first.split(',').next_back().unwrap_or_default().trim();
        if head.parse::<f64>().is_err() {
            lines.remove(0);
        }
    }
    Ok(lines)
}

fn cmd_anonymize(epoch: u64, key_file: &Path, input: &Path, output: &Path) -> Result<()> {
    let bytes = fs::read(key_file).with_context(|| format!("reading {}", key_file.display()))?;
    let key = PseudonymKey::from_bytes(&bytes, epoch)?;
    let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
    let writer = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let rows = pseudonymize_csv(reader, writer, &key)?;
    eprintln!("pseudonymized {rows} rows");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_dp_query(
    op: DpOp,
    epsilon: f64,
    delta: f64,
    ledger_path: &Path,
    epsilon_cap: f64,
    seed: Option<u64>,
    timestamp: Option<&str>,
    bins: usize,
    ingest: IngestArgs,
    input: &Path,
) -> Result<()> {
    let dataset = ingest.load(input)?;
    let params = PrivacyParams::new(epsilon, delta)?;
    let ledger = match File::open(ledger_path) {
        Ok(f) => BudgetLedger::read_from(BufReader::new(f), epsilon_cap)?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => BudgetLedger::new(epsilon_cap)?,
        Err(e) => return Err(e).with_context(|| format!("opening {}", ledger_path.display())),
    };
    let already = ledger.len();
    let timestamps: Vec<i64> = match timestamp {
        Some(raw) => vec![raw
            .trim()
            .parse::<i64>()
            .ok()
            .or_else(|| parse_timestamp(raw))
            .with_context(|| format!("invalid timestamp {raw:?}"))?],
        None => {
            let mut ts: Vec<i64> = dataset.readings().map(|r| r.timestamp()).collect();
            ts.sort_unstable();
            ts.dedup();
            ts
        }
    };
    let hist = HistogramSpec::uniform(dataset.delta_max(), bins)?;
    let mut rng = rng_from(seed);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match op {
        DpOp::Histogram => writeln!(out, "query_id,timestamp,bin_lower_kwh,bin_upper_kwh,value")?,
        _ => writeln!(out, "query_id,timestamp,value")?,
    }
    let mut failure = None;
    for ts in timestamps {
        let answers: Result<Vec<DpAnswer>, _> = match op {
            DpOp::Sum => dp_sum(&dataset, ts, &params, &ledger, None, &mut rng).map(|a| vec![a]),
            DpOp::Count => dp_count(&dataset, ts, &params, &ledger, None, &mut rng).map(|a| vec![a]),
            DpOp::Mean => dp_mean(&dataset, ts, &params, &ledger, None, &mut rng).map(|a| vec![a]),
            DpOp::Histogram => dp_histogram(&dataset, ts, &hist, &params, &ledger, None, &mut rng),
        };
        match answers {
            Ok(answers) => {
                for (bin, a) in answers.iter().enumerate() {
                    let id = a.query_id.as_deref().unwrap_or("");
                    let when = format_timestamp(ts);
                    match op {
                        DpOp::Histogram => {
                            let edges = hist.edges();
                            writeln!(out, "{id},{when},{},{},{}", edges[bin].kwh(), edges[bin + 1].kwh(), a.value)?
                        }
                        _ => writeln!(out, "{id},{when},{}", a.value)?,
                    }
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(ledger_path)
        .with_context(|| format!("opening {}", ledger_path.display()))?;
    for entry in ledger.entries().iter().skip(already) {
        writeln!(file, "{}", entry.to_line())?;
    }
    file.sync_data()?;
    eprintln!("epsilon spent {} of {}", ledger.spent(), ledger.epsilon_cap());
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_synth_gen(
    real: &Path,
    clusters: usize,
    households: usize,
    days: usize,
    seed: u64,
    out: &Path,
    ingest: IngestArgs,
) -> Result<()> {
    let dataset = ingest.load(real)?;
    let model = fit(&dataset, clusters, seed)?;
    let synth = generate(&model, households, days, seed.wrapping_add(1))?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&synth, file)?;
    eprintln!("wrote {} synthetic households x {days} days", synth.series().len());
    Ok(())
}

fn cmd_synth_check(real: &Path, synth: &Path, threshold: f64, ingest: IngestArgs) -> Result<()> {
    let real = ingest.load(real)?;
    let synth = ingest.load(synth)?;
    let f = fidelity_report(&real, &synth)?;
    let p = privacy_check(&real, &synth, threshold)?;
    for h in 0..HOURS {
        println!("fidelity.hour_{h:02}.mean_rel_err={:.6}", f.per_hour_mean_rel_err[h]);
    }
    println!("fidelity.max_hourly_mean_rel_err={:.6}", f.max_hourly_rel_err());
    println!("fidelity.hist_l1={:.6}", f.hist_l1);
    println!("fidelity.peak_rel_err={:.6}", f.peak_dist_rel_err);
    println!("privacy.min_nn_distance={:.6}", p.min_nn_distance);
    println!("privacy.memorization_flag={}", p.memorization_flag);
    println!("privacy.distinguisher_auc={:.6}", p.distinguisher_auc);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fed_train(
    clients: usize,
    rounds: usize,
    local_steps: usize,
    lr: f64,
    clip: Option<f64>,
    dp_sigma: Option<f64>,
    secure_agg: bool,
    seed: u64,
    ingest: IngestArgs,
    data: &Path,
) -> Result<()> {
    let dataset = ingest.load(data)?;
    let shards = shard_round_robin(&dataset, clients)?;
    let mut cfg = RoundConfig::new(rounds, local_steps, lr)?;
    if let Some(c) = clip {
        cfg = cfg.with_clip_norm(c)?;
    }
    if let Some(s) = dp_sigma {
        cfg = cfg.with_dp_sigma(s)?;
    }
    if secure_agg {
        cfg = cfg.with_aggregation(Aggregation::Masked);
    }
    let result = run_federation(&shards, &cfg, seed)?;
    println!("round,participants,n_samples,mse");
    for m in &result.history {
        let mse = m.mse.map(|v| v.to_string()).unwrap_or_default();
        println!("{},{},{},{mse}", m.round, m.participants, m.n_samples);
    }
    let weights: Vec<String> = result.final_model.weights().iter().map(|w| w.to_string()).collect();
    eprintln!("final weights [lag1, lag96, hour, bias] = [{}]", weights.join(", "));
    Ok(())
}

fn cmd_smpc_sum(min_participants: usize, seed: Option<u64>, transcript: &Path, inputs: &Path) -> Result<()> {
    let mut parties = Vec::new();
    for (line_no, line) in data_lines(inputs)? {
        let (id, kwh) = line.split_once(',').with_context(|| format!("line {line_no}: expected party_id,kwh"))?;
        let id: u32 = id.trim().parse().with_context(|| format!("line {line_no}: bad party id"))?;
        let kwh: f64 = kwh.trim().parse().with_context(|| format!("line {line_no}: bad kwh"))?;
        parties.push(PartyInput::new(PartyId(id), EnergyQuantity::from_kwh_f64(kwh)));
    }
    let run = secure_sum(&parties, min_participants, &mut rng_from(seed))?;
    fs::write(transcript, run.transcript.to_csv()).with_context(|| format!("writing {}", transcript.display()))?;
    match run.outcome {
        SecureSumOutcome::Completed(total) => {
            println!("sum_kwh={}", total.kwh());
            Ok(())
        }
        SecureSumOutcome::Aborted(reason) => bail!("protocol aborted: {reason}"),
    }
}

fn default_secret_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "key".into());
    out.with_file_name(format!("{stem}.secret.json"))
}

fn write_private(path: &Path, contents: &str) -> Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).with_context(|| format!("creating {}", path.display()))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        f.set_permissions(fs::Permissions::from_mode(0o600))?;
    }
    f.write_all(contents.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

fn cmd_he_keygen(bits: u64, out: &Path, secret_out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let kp = keygen(bits, &mut rng_from(seed))?;
    let secret_path = secret_out.unwrap_or_else(|| default_secret_path(out));
    write_private(&secret_path, &serde_json::to_string_pretty(&kp.to_secret_file())?)?;
    fs::write(out, serde_json::to_string_pretty(&PublicKeyFile::from_key(kp.public()))?)
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("key_id={} bits={}", kp.public().key_id(), kp.public().bits());
    eprintln!("public key: {}", out.display());
    eprintln!("secret key: {}", secret_path.display());
    Ok(())
}

fn cmd_he_bill(public: &Path, rates: &Path, max_usage_kwh: f64, seed: Option<u64>, usage: &Path) -> Result<()> {
    let pk_file: PublicKeyFile = serde_json::from_str(&fs::read_to_string(public)?).context("parsing public key")?;
    let pk = pk_file.to_key()?;
    let rates: Vec<u64> = data_lines(rates)?
        .into_iter()
        .map(|(n, l)| l.parse().with_context(|| format!("rates line {n}: expected a non-negative integer")))
        .collect::<Result<_>>()?;
    let usage: Vec<u64> = data_lines(usage)?
        .into_iter()
        .map(|(n, l)| {
            let kwh: f64 = l.parse().with_context(|| format!("usage line {n}: expected kWh"))?;
            let milli = EnergyQuantity::from_kwh_f64(kwh).milli_kwh();
            u64::try_from(milli).with_context(|| format!("usage line {n}: negative usage"))
        })
        .collect::<Result<_>>()?;
    let max_usage = u64::try_from(EnergyQuantity::from_kwh_f64(max_usage_kwh).milli_kwh()).context("negative max usage")?;
    if let Some(u) = usage.iter().find(|&&u| u > max_usage) {
        bail!("usage {u} milli-kWh exceeds --max-usage-kwh");
    }
    let mut rng = rng_from(seed);
    let cts = usage.iter().map(|&u| pk.encrypt_u64(u, &mut rng)).collect::<Result<Vec<_>, _>>()?;
    let bill = pk.encrypted_bill(&cts, &RateSchedule::new(rates, max_usage))?;
    println!("{}", bill.to_hex());
    eprintln!("key_id={} (plaintext bill is in rate units x milli-kWh)", bill.key_id());
    Ok(())
}

fn cmd_he_decrypt(key: &Path, ciphertext: &Path) -> Result<()> {
    let sk: SecretKeyFile = serde_json::from_str(&fs::read_to_string(key)?).context("parsing secret key")?;
    let kp = PaillierKeypair::from_secret_file(&sk)?;
    let hex = fs::read_to_string(ciphertext).with_context(|| format!("reading {}", ciphertext.display()))?;
    let ct = kp.public().ciphertext_from_hex(hex.trim())?;
    println!("{}", kp.decrypt(&ct)?);
    Ok(())
}

fn cmd_gateway_serve(policy: &Path, data: &Path, audit_log: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(policy).with_context(|| format!("reading {}", policy.display()))?;
    let policy: PolicyConfig = toml::from_str(&text).context("parsing policy")?;
    policy.validate()?;
    let store = DataStore::load_dir(data, &policy.ingest_config()?)?;
    let audit = AuditLog::open_jsonl(audit_log).with_context(|| format!("opening audit log {}", audit_log.display()))?;
    let seed = seed.unwrap_or_else(rand::random);
    let mut gateway = Gateway::new(policy, store, audit, seed)?;
    let stdin = io::stdin();
    let handled = serve(&mut gateway, stdin.lock(), io::stdout().lock())?;
    eprintln!("handled {handled} requests; epsilon spent {}", gateway.ledger().spent());
    Ok(())
}

fn cmd_audit_show(log: &Path, verify: bool) -> Result<()> {
    let file = File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let records = read_jsonl(BufReader::new(file))?;
    for r in &records {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.seq,
            format_timestamp(r.timestamp),
            r.request_id,
            r.requester,
            serde_json::to_string(&r.outcome)?,
            r.mechanism,
            r.epsilon_spent
        );
    }
    if verify {
        let v = verify_chain(&records);
        match v.first_bad_seq {
            None if v.valid => println!("chain: valid ({} records)", records.len()),
            bad => {
                println!("chain: INVALID at seq {}", bad.map(|s| s.to_string()).unwrap_or_else(|| "?".into()));
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Anonymize { epoch, key_file, input, output } => cmd_anonymize(epoch, &key_file, &input, &output),
        Command::DpQuery { op, epsilon, delta, ledger, epsilon_cap, seed, timestamp, bins, ingest, input } => {
            cmd_dp_query(op, epsilon, delta, &ledger, epsilon_cap, seed, timestamp.as_deref(), bins, ingest, &input)
        }
        Command::SynthGen { fit, clusters, households, days, seed, out, ingest } => {
            cmd_synth_gen(&fit, clusters, households, days, seed, &out, ingest)
        }
        Command::SynthCheck { real, synth, threshold, ingest } => cmd_synth_check(&real, &synth, threshold, ingest),
        Command::FedTrain { clients, rounds, local_steps, lr, clip, dp_sigma, secure_agg, seed, ingest, data } => {
            cmd_fed_train(clients, rounds, local_steps, lr, clip, dp_sigma, secure_agg, seed, ingest, &data)
        }
        Command::SmpcSum { min_participants, seed, transcript, inputs } => {
            cmd_smpc_sum(min_participants, seed, &transcript, &inputs)
        }
        Command::HeKeygen { bits, out, secret_out, seed } => cmd_he_keygen(bits, &out, secret_out, seed),
        Command::HeBill { public, rates, max_usage_kwh, seed, usage } => {
            cmd_he_bill(&public, &rates, max_usage_kwh, seed, &usage)
        }
        Command::HeDecrypt { key, ciphertext } => cmd_he_decrypt(&key, &ciphertext),
        Command::Gateway { command: GatewayCommand::Serve { policy, data, audit_log, seed } } => {
            cmd_gateway_serve(&policy, &data, &audit_log, seed)
        }
        Command::AuditShow { log, verify } => cmd_audit_show(&log, verify),
    }
}
