fn main() {
    std::process::exit(tuberf::autodiff::FORMAT_VERSION as i32 - 1);
}
