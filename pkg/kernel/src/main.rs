//! Standalone CLI over DHC1 code databases.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use hamming_kernel::{map_score, PackedCodeDb};

#[derive(Parser)]
#[command(name = "hamming-kernel", about = "bit-packed Hamming retrieval over DHC1 files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// mAP (or t-mAP with --target) of a query set against a database
    Map {
        #[arg(long)]
        queries: String,
        #[arg(long)]
        db: String,
        /// one-hot target class replacing every query label
        #[arg(long)]
        target: Option<u32>,
    },
    /// Ranked indices for one query row of the query file
    Rank {
        #[arg(long)]
        queries: String,
        #[arg(long)]
        db: String,
        /// row of the query file to rank (default 0)
        #[arg(long, default_value_t = 0)]
        row: usize,
        /// print only the first k indices
        #[arg(long)]
        top: Option<usize>,
    },
    /// Time a full ranking over a synthetic database
    Bench {
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
}

fn load(path: &str) -> Result<PackedCodeDb, String> {
    let blob = fs::read(path).map_err(|e| format!("{path}: {e}"))?;
    PackedCodeDb::from_dhc1(&blob).map_err(|e| format!("{path}: {e}"))
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Map { queries, db, target } => {
            let q = load(&queries)?;
            let d = load(&db)?;
            let v = map_score(&q, &d, target).map_err(|e| e.to_string())?;
            println!("{v}");
        }
        Command::Rank { queries, db, row, top } => {
            let q = load(&queries)?;
            let d = load(&db)?;
            if row >= q.n {
                return Err(format!("query row {row} out of range (N={})", q.n));
            }
            let order = d.rank(q.code_row(row)).map_err(|e| e.to_string())?;
            let cut = top.unwrap_or(order.len()).min(order.len());
            let text: Vec<String> = order[..cut].iter().map(|i| i.to_string()).collect();
            println!("{}", text.join(" "));
        }
        Command::Bench { n, k, repeats } => {
            // xorshift-filled synthetic database; content is irrelevant to timing
            let mut state = 0x9e3779b97f4a7c15u64;
            let mut next = move || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                state
            };
            let codes: Vec<i8> = (0..n * k)
                .map(|_| if next() & 1 == 1 { 1 } else { -1 })
                .collect();
            let labels = vec![1u8; n];
            let db = PackedCodeDb::pack(&codes, &labels, n, k, 1)
                .map_err(|e| e.to_string())?;
            let query = db.code_row(n / 2).to_vec();
            let start = Instant::now();
            let mut sink = 0u64;
            for _ in 0..repeats {
                sink += db.rank(&query).map_err(|e| e.to_string())?[0] as u64;
            }
            let per = start.elapsed().as_secs_f64() / repeats as f64;
            println!("rank over N={n} K={k}: {:.1} ms/query (checksum {sink})", per * 1e3);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
