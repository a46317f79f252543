//! Wire-protocol backend wrapping the in-process perceptron. Used to test
//! the external-backend path without a transformer stack.

use std::io::{stdin, stdout};

use medtag::backend::external::serve;
use medtag::backend::PerceptronBackend;

fn main() -> std::io::Result<()> {
    serve(&mut PerceptronBackend, stdin().lock(), stdout().lock())
}
