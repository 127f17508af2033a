fn main() {
    std::process::exit(permfill::cli::run(std::env::args_os()));
}
