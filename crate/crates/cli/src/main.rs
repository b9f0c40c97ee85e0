fn main() {
    std::process::exit(mtl_cli::run(std::env::args_os()));
}
