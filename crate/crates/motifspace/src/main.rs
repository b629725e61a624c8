fn main() { std::process::exit(motifspace::cli::run(std::env::args())); }
