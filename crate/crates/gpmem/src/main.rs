//! Binary entry point.

fn main() {
    std::process::exit(gpmem::cli::run());
}
