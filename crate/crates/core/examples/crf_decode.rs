//! Linear-chain CRF: partition function, marginals and BIO-constrained decoding.
//!
//! cargo run --example crf_decode

use mner::crf::{log_partition, marginals, nll, viterbi, CrfParams, Emissions};
use mner::data::Label;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mner::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 5;
    let emissions = Emissions::random(n, Label::COUNT, 2.0, &mut rng);
    let params = CrfParams::random(Label::COUNT, 1.0, &mut rng);

    println!("log Z = {:.6}", log_partition(&emissions, &params)?);
    let m = marginals(&emissions, &params)?;
    for t in 0..n {
        let row = &m[t * Label::COUNT..(t + 1) * Label::COUNT];
        let (best, p) = row.iter().enumerate().fold((0, 0.0), |a, (i, &p)| if p > a.1 { (i, p) } else { a });
        println!("position {t}: most likely {} (p = {p:.3})", Label::from_index(best).unwrap());
    }

    let show = |path: &[usize]| path.iter().map(|&i| Label::from_index(i).unwrap().to_string()).collect::<Vec<_>>().join(" ");
    let (free, s1) = viterbi(&emissions, &params, false)?;
    let (bio, s2) = viterbi(&emissions, &params, true)?;
    println!("unconstrained: {}  (score {s1:.3})", show(&free));
    println!("BIO-valid:     {}  (score {s2:.3})", show(&bio));
    println!("nll of the BIO path = {:.4}", nll(&emissions, &params, &bio)?);
    Ok(())
}
