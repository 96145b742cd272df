mod conv;
mod elementwise;
mod norm;
mod reduce;
mod spatial;
