fn main() {
    std::process::exit(addrgraph_cli::run(std::env::args()));
}
