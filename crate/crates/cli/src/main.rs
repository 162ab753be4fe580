fn main() {
    std::process::exit(cyten::dispatch(std::env::args_os()));
}
