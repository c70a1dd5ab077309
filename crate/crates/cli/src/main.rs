fn main() {
    std::process::exit(flowproc::main_with_args(std::env::args_os().collect()));
}
