fn main() {
    std::process::exit(finevl::cli::main_with(std::env::args_os().skip(1)));
}
