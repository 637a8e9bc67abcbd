fn main() {
    std::process::exit(cdmem_cli::run());
}
