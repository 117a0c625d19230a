//! Seeded random MiniDyn program generator.
//!
//! Drives the differential suites: generated programs are well-formed
//! (no unbound identifiers, no unbounded loops, no recursion) but
//! deliberately type-unstable, so that warmed-up specializations face
//! guard failures, integer overflow, tagged values and kind changes.
//! Runtime errors (index out of bounds, length mismatches) may occur;
//! both tiers must then fail identically.

/// splitmix64: deterministic, seedable, no dependencies.
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng(seed.wrapping_add(0x9e3779b97f4a7c15))
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n.max(1)
    }

    pub fn chance(&mut self, pct: u64) -> bool {
        self.below(100) < pct
    }
}

struct Gen {
    rng: Rng,
    out: String,
    globals: Vec<String>,
    /// (name, arity) of functions defined so far
    functions: Vec<(String, usize)>,
}

pub fn generate(seed: u64) -> String {
    let mut g = Gen { rng: Rng::new(seed), out: String::new(), globals: vec![], functions: vec![] };
    g.program();
    g.out
}

impl Gen {
    fn program(&mut self) {
        // seed a few globals with literals of mixed kinds
        let n_globals = 2 + self.rng.below(3) as usize;
        for i in 0..n_globals {
            let name = format!("g{i}");
            let lit = self.literal_text();
            self.out.push_str(&format!("{name} <- {lit}\n"));
            self.globals.push(name);
        }
        // a few functions, later ones may call earlier ones
        let n_funcs = 1 + self.rng.below(3) as usize;
        for i in 0..n_funcs {
            self.function(i);
        }
        // top-level workload: call functions with shifting argument
        // types, mutate globals, finish with an observable expression
        let n_stmts = 3 + self.rng.below(5) as usize;
        for _ in 0..n_stmts {
            self.top_stmt();
        }
        let expr = self.expr(&self.scope_top(), 2);
        self.out.push_str(&expr);
        self.out.push('\n');
    }

    fn scope_top(&self) -> Vec<String> {
        self.globals.clone()
    }

    fn function(&mut self, index: usize) {
        let name = format!("f{index}");
        let arity = 1 + self.rng.below(2) as usize;
        let params: Vec<String> = (0..arity).map(|i| format!("p{i}")).collect();
        self.out.push_str(&format!("{name} <- function({}) {{\n", params.join(", ")));
        let mut scope = params.clone();
        scope.extend(self.globals.iter().cloned());
        let n_stmts = 1 + self.rng.below(3) as usize;
        for _ in 0..n_stmts {
            let stmt = self.fn_stmt(&mut scope);
            self.out.push_str(&stmt);
        }
        let last = self.expr(&scope, 2);
        self.out.push_str(&format!("  {last}\n}}\n"));
        self.functions.push((name, arity));
    }

    fn fn_stmt(&mut self, scope: &mut Vec<String>) -> String {
        match self.rng.below(10) {
            0..=3 => {
                // local assignment introduces a new name or rebinds
                let name = if self.rng.chance(50) && !scope.is_empty() {
                    scope[self.rng.below(scope.len() as u64) as usize].clone()
                } else {
                    let n = format!("v{}", self.rng.below(1000));
                    scope.push(n.clone());
                    n
                };
                let e = self.expr(scope, 2);
                format!("  {name} <- {e}\n")
            }
            4 => {
                // superassignment pollutes a global from inside
                let g = self.globals[self.rng.below(self.globals.len() as u64) as usize].clone();
                let e = self.expr(scope, 2);
                format!("  {g} <<- {e}\n")
            }
            5..=6 => {
                let var = format!("i{}", self.rng.below(1000));
                let lo = 1 + self.rng.below(2);
                let hi = 1 + self.rng.below(4);
                scope.push(var.clone());
                let body = self.expr(scope, 1);
                let acc = scope[self.rng.below(scope.len() as u64) as usize].clone();
                format!("  for ({var} in {lo}L:{hi}L) {acc} <- {body}\n")
            }
            7 => {
                let cond = self.scalar_cond(scope);
                let a = self.expr(scope, 1);
                let b = self.expr(scope, 1);
                let target = {
                    let n = format!("v{}", self.rng.below(1000));
                    scope.push(n.clone());
                    n
                };
                format!("  if ({cond}) {target} <- {a} else {target} <- {b}\n")
            }
            _ => {
                let e = self.expr(scope, 2);
                format!("  {e}\n")
            }
        }
    }

    fn top_stmt(&mut self) {
        match self.rng.below(10) {
            0..=2 => {
                let g = self.globals[self.rng.below(self.globals.len() as u64) as usize].clone();
                // kind changes at top level are the classic staleness source
                let lit = self.literal_text();
                self.out.push_str(&format!("{g} <- {lit}\n"));
            }
            3..=7 if !self.functions.is_empty() => {
                // call a function several times in a loop so it warms up
                let (name, arity) =
                    self.functions[self.rng.below(self.functions.len() as u64) as usize].clone();
                let reps = 2 + self.rng.below(6);
                let args: Vec<String> =
                    (0..arity).map(|_| self.arg_text()).collect();
                let g = self.globals[self.rng.below(self.globals.len() as u64) as usize].clone();
                self.out.push_str(&format!(
                    "for (t{} in 1L:{reps}L) {g} <- {name}({})\n",
                    self.rng.below(1000),
                    args.join(", ")
                ));
            }
            _ => {
                let scope = self.scope_top();
                let e = self.expr(&scope, 2);
                self.out.push_str(&format!("{e}\n"));
            }
        }
    }

    fn literal_text(&mut self) -> String {
        match self.rng.below(8) {
            0 => format!("{}L", self.rng.below(100)),
            1 => format!("{}", self.rng.below(100)),
            2 => format!("{}.5", self.rng.below(50)),
            3 => "TRUE".into(),
            4 => "FALSE".into(),
            // near-overflow integers provoke promotion and deopt paths
            5 => format!("{}L", 2147483600u64 + self.rng.below(47)),
            6 => {
                let n = 2 + self.rng.below(3);
                let items: Vec<String> =
                    (0..n).map(|_| format!("{}", self.rng.below(20))).collect();
                format!("c({})", items.join(", "))
            }
            _ => {
                let n = 2 + self.rng.below(3);
                let items: Vec<String> =
                    (0..n).map(|_| format!("{}L", self.rng.below(20))).collect();
                format!("c({})", items.join(", "))
            }
        }
    }

    fn arg_text(&mut self) -> String {
        if self.rng.chance(15) {
            format!("structure({}, class = \"tag{}\")", self.rng.below(9), self.rng.below(3))
        } else if self.rng.chance(30) && !self.globals.is_empty() {
            self.globals[self.rng.below(self.globals.len() as u64) as usize].clone()
        } else {
            self.literal_text()
        }
    }

    fn scalar_cond(&mut self, scope: &[String]) -> String {
        let a = self.atom(scope);
        let b = self.atom(scope);
        let op = ["<", "<=", ">", ">=", "==", "!="][self.rng.below(6) as usize];
        format!("{a} {op} {b}")
    }

    fn atom(&mut self, scope: &[String]) -> String {
        if !scope.is_empty() && self.rng.chance(55) {
            scope[self.rng.below(scope.len() as u64) as usize].clone()
        } else {
            match self.rng.below(4) {
                0 => format!("{}L", self.rng.below(50)),
                1 => format!("{}", self.rng.below(50)),
                2 => format!("{}.25", self.rng.below(9)),
                _ => "2L".into(),
            }
        }
    }

    fn expr(&mut self, scope: &[String], depth: u32) -> String {
        if depth == 0 {
            return self.atom(scope);
        }
        match self.rng.below(12) {
            0..=4 => {
                let a = self.expr(scope, depth - 1);
                let b = self.expr(scope, depth - 1);
                let op = ["+", "-", "*", "/", "%%", "^"][self.rng.below(6) as usize];
                format!("({a} {op} {b})")
            }
            5 => {
                let a = self.expr(scope, depth - 1);
                let b = self.atom(scope);
                let op = ["<", "<=", ">", ">=", "==", "!="][self.rng.below(6) as usize];
                format!("({a} {op} {b})")
            }
            6 => {
                let n = 2 + self.rng.below(2);
                let items: Vec<String> =
                    (0..n).map(|_| self.expr(scope, depth - 1)).collect();
                format!("c({})", items.join(", "))
            }
            7 => {
                let inner = self.atom(scope);
                format!("structure({inner}, class = \"k{}\")", self.rng.below(3))
            }
            8 => {
                let v = self.expr(scope, depth - 1);
                match self.rng.below(5) {
                    0 => format!("length({v})"),
                    1 => format!("sum({v})"),
                    2 => format!("abs({v})"),
                    3 => format!("el({v}, {}L)", 1 + self.rng.below(3)),
                    _ => format!("rep({}, {}L)", self.atom(scope), 1 + self.rng.below(4)),
                }
            }
            9 if !self.functions.is_empty() => {
                let (name, arity) =
                    self.functions[self.rng.below(self.functions.len() as u64) as usize].clone();
                let args: Vec<String> =
                    (0..arity).map(|_| self.expr(scope, depth - 1)).collect();
                format!("{name}({})", args.join(", "))
            }
            _ => self.atom(scope),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(42), generate(42));
        assert_ne!(generate(1), generate(2));
    }

    #[test]
    fn generated_programs_compile() {
        let mut ok = 0;
        for seed in 0..200 {
            let src = generate(seed);
            match crate::lower::compile(&src) {
                Ok(_) => ok += 1,
                Err(e) => panic!("seed {seed} failed to compile: {e}\n{src}"),
            }
        }
        assert_eq!(ok, 200);
    }
}
