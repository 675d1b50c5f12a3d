fn main() {
    println!("embtrack CLI placeholder");
}
