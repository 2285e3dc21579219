fn main() {
    std::process::exit(bingo::cli::dispatch(std::env::args_os()));
}
