fn main() {
    for r in esdt::checks::oracle_check_suite() {
        println!("{}", r.line());
    }
}
