fn main() {
    std::process::exit(palaver::cli::dispatch(std::env::args_os()));
}
