fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(ptp_core::cli::run(&argv));
}
