fn main() {
    std::process::exit(fundrank::run());
}
