fn main() {
    std::process::exit(strokesyn::cli::dispatch());
}
