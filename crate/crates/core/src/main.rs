fn main() {
    std::process::exit(phasebal::harness::main_with_args(std::env::args_os()));
}
