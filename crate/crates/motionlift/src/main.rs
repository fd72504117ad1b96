fn main() {
    std::process::exit(motionlift::cli::run());
}
