fn main() {
    std::process::exit(dhcn::cli::run(std::env::args_os()));
}
