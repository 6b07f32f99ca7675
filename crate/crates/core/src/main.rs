fn main() {
    std::process::exit(dss::cli::main(std::env::args_os()));
}
