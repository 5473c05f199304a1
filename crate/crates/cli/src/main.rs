use clap::Parser;

fn main() {
    std::process::exit(spde_ldp_cli::run(spde_ldp_cli::Cli::parse()));
}
