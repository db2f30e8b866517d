fn main() {
    std::process::exit(iotscope::cli::run());
}
