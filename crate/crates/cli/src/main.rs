fn main() {
    println!("fedseq");
}
