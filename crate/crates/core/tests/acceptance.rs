fn main() {
    println!("acceptance suite placeholder");
}
