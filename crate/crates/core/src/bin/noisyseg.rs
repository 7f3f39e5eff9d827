fn main() {
    std::process::exit(noisyseg::cli::dispatch(std::env::args_os()));
}
