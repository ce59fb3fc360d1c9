fn main() {
    std::process::exit(egcnn::cli::run());
}
